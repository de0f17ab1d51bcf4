"""Behaviour of the default scenario beyond the acceptance thresholds (slow)."""

import numpy as np
import pytest

from ims import pipeline
from ims.defense import DefenseConfig, mask_init
from ims.masking import SelectionMaskSet, mask_arrays
from ims.model import predict

pytestmark = pytest.mark.scenario

C = 8


@pytest.fixture(scope="module")
def mitigation(default_run):
    split = pipeline.triggered_test(default_run.cfg, default_run.scenario)
    return split.mitigation


@pytest.fixture(scope="module")
def initialised(default_run, mitigation):
    cfg = default_run.cfg.defense.config
    masks = SelectionMaskSet.init_for(default_run.model.layer_channels, cfg.a_init, cfg.s_init, cfg.k)
    _, trace = mask_init(default_run.model, masks, mitigation.images, cfg)
    return masks, trace


def test_attack_calibration(default_run):
    assert default_run.attack_report.clean_acc >= 0.90
    assert default_run.attack_report.asr >= 0.95
    assert default_run.attack_report.poisoned_samples == 160


def test_mask_after_init_keeps_clean_accuracy(default_run, mitigation, initialised):
    mask, _ = mask_arrays(initialised[0])
    model, x, y = default_run.model, mitigation.images, mitigation.labels
    plain = (predict(model, x) == y).mean()
    masked = (predict(lambda t: model.forward(t, mask), x) == y).mean()
    assert masked >= plain - 0.05


def test_inverse_after_init_breaks_clean_accuracy(default_run, mitigation, initialised):
    _, inverse = mask_arrays(initialised[0])
    model, x, y = default_run.model, mitigation.images, mitigation.labels
    assert (predict(lambda t: model.forward(t, inverse), x) == y).mean() <= 2 / C


def test_init_objective_decreases(initialised):
    rows = initialised[1].phase("init")
    assert len(rows) == DefenseConfig().r1
    assert np.mean([r.loss_total for r in rows[-20:]]) < np.mean([r.loss_total for r in rows[:20]])
    assert rows[-1].disagree_clean_inv < rows[0].disagree_clean_inv


def test_outer_loss_falls_between_first_and_last_quarter(default_run):
    rows = default_run.result.trace.phase("outer")
    q = len(rows) // 4
    first = np.mean([r.loss_total for r in rows[:q]])
    last = np.mean([r.loss_total for r in rows[-q:]])
    assert last < first


def test_masks_stay_in_range(default_run):
    default_run.result.masks.check_range()


def test_no_poison_means_no_backdoor(default_cfg):
    cfg = default_cfg.with_overrides(ratio=0.0)
    _, report = pipeline.attack(cfg)
    assert report.asr <= 2 / C
    assert report.poisoned_samples == 0


def test_lambda_trend(default_cfg, default_run):
    asr = {10.0: default_run.row.asr}
    for lam in (0.0, 100.0):
        cfg = default_cfg.with_overrides(lambda_final=lam)
        result, _ = pipeline.defend(cfg, default_run.model, default_run.scenario)
        row, _ = pipeline.evaluate(cfg, default_run.model, result.masks, default_run.scenario)
        asr[lam] = row.asr
    print("ASR by lambda:", asr)
    assert asr[10.0] <= asr[100.0]
