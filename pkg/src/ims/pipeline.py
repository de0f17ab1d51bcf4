"""Attack, defend and evaluate stages shared by the CLI, sweeps and tests."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .data import make_defender_split, poison, train_backdoored
from .defense import DefenseResult, run_ims, synthesize_perturbations, target_proportion
from .experiment import ExperimentConfig, Scenario, build_scenario
from .masking import SelectionMaskSet, effective_sparsity, identity_masks, mask_arrays
from .metrics import compute_arr, compute_rdr, asr_from_predictions, recovery_from_predictions
from .model import MaskableModel, ModelSpec, predict


@dataclass
class AttackReport:
    clean_acc: float
    asr: float
    recovery: float
    poisoned_samples: int
    epochs: int
    final_loss: float
    seconds: float
    passed: bool


@dataclass
class ResultsRow:
    scenario: str
    seed: int
    spc: int
    ratio: float
    lambda_final: float
    k: float
    asr: float
    arr: float
    rdr: float
    target_proportion: float
    effective_sparsity: float
    acc_pre: float
    acc_post: float
    asr_pre: float
    recovery_pre: float
    recovery_post: float
    rdr_pre: float
    asr_x100: float
    arr_x100: float
    rdr_x100: float
    seconds: float
    status: str = "ok"

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def failed(cls, scenario: str, cfg: ExperimentConfig, status: str) -> "ResultsRow":
        nan = float("nan")
        d = cfg.defense.config
        return cls(scenario, d.seed, cfg.defense.spc, cfg.attack.ratio, d.lambda_final, d.k,
                   *([nan] * 15), status=status)

    def as_dict(self) -> dict:
        return asdict(self)


def scenario_id(cfg: ExperimentConfig) -> str:
    d = cfg.defense.config
    tag = f"{cfg.dataset.source}-{cfg.attack.trigger}-r{cfg.attack.ratio:g}-spc{cfg.defense.spc}"
    tag += f"-lam{d.lambda_final:g}-k{d.k:g}-s{d.seed}"
    if d.skip_mask_init:
        tag += "-noinit"
    return tag


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    d = cfg.dataset
    return ModelSpec.tiny_cnn((d.channels, d.size, d.size), d.classes)


def triggered_test(cfg: ExperimentConfig, scenario: Scenario):
    trigger = cfg.trigger(scenario.test.image_shape)
    return make_defender_split(scenario.pool, scenario.test, trigger, cfg.defense.spc, seed=cfg.defense.split_seed)


def attack(cfg: ExperimentConfig, scenario: Optional[Scenario] = None) -> tuple:
    """Poison, train and score the backdoored model; returns ``(model, report)``."""
    scenario = scenario or build_scenario(cfg)
    a = cfg.attack
    t0 = time.perf_counter()
    trigger = cfg.trigger(scenario.train.image_shape)
    poisoned = poison(scenario.train, trigger, a.ratio, seed=a.seed)
    spec = ModelSpec.tiny_cnn(scenario.train.image_shape, scenario.train.num_classes)
    model, log = train_backdoored(spec, poisoned, epochs=a.epochs, seed=a.seed, lr=a.lr, batch_size=a.batch_size)
    split = triggered_test(cfg, scenario)
    clean_pred = predict(model, split.clean_test.images)
    trig_pred = predict(model, split.triggered_test.images)
    acc = float((clean_pred == split.clean_test.labels).mean())
    asr = asr_from_predictions(trig_pred, split.triggered_test.labels, a.target)
    rec = recovery_from_predictions(trig_pred, split.triggered_test.labels)
    ev = cfg.evaluation
    report = AttackReport(
        clean_acc=acc, asr=asr, recovery=rec, poisoned_samples=int(poisoned.poisoned.sum()),
        epochs=a.epochs, final_loss=float(log.epoch_loss[-1]), seconds=time.perf_counter() - t0,
        passed=acc >= ev.min_clean_acc and asr >= ev.min_asr,
    )
    return model, report


def defend(cfg: ExperimentConfig, model: MaskableModel, scenario: Optional[Scenario] = None) -> tuple:
    """Run the mask defense on the defender's clean split; returns ``(result, seconds)``."""
    scenario = scenario or build_scenario(cfg)
    split = triggered_test(cfg, scenario)
    t0 = time.perf_counter()
    result = run_ims(model, split.mitigation.images, cfg.defense.config)
    return result, time.perf_counter() - t0


def evaluate(cfg: ExperimentConfig, model: MaskableModel, masks: Optional[SelectionMaskSet] = None,
             scenario: Optional[Scenario] = None, seconds: float = 0.0) -> tuple:
    """Score the undefended and masked model; returns ``(row, x_hat)``.

    ``model`` carries the backdoored weights (any baked scales are ignored);
    ``masks=None`` evaluates the identity mask.
    """
    scenario = scenario or build_scenario(cfg)
    base = model.without_masks()
    masks = masks if masks is not None else identity_masks(base.layer_channels)
    defended = base.with_baked_masks(mask_arrays(masks)[0])
    split = triggered_test(cfg, scenario)
    t = cfg.attack.target
    y = split.clean_test.labels
    yt = split.triggered_test.labels

    pre_clean = predict(base, split.clean_test.images)
    pre_trig = predict(base, split.triggered_test.images)
    post_clean = predict(defended, split.clean_test.images)
    post_trig = predict(defended, split.triggered_test.images)
    acc_pre = float((pre_clean == y).mean())
    acc_post = float((post_clean == y).mean())
    rec_pre = recovery_from_predictions(pre_trig, yt)
    rec_post = recovery_from_predictions(post_trig, yt)
    asr = asr_from_predictions(post_trig, yt, t)
    arr = compute_arr(acc_pre, acc_post)
    rdr = compute_rdr(acc_pre, rec_post)

    x_hat = synthesize_perturbations(base, masks, split.mitigation.images, cfg.defense.config)
    tp = target_proportion(defended, x_hat, t)
    d = cfg.defense.config
    row = ResultsRow(
        scenario=scenario_id(cfg), seed=d.seed, spc=cfg.defense.spc, ratio=cfg.attack.ratio,
        lambda_final=d.lambda_final, k=float(masks.k), asr=asr, arr=arr, rdr=rdr,
        target_proportion=tp, effective_sparsity=effective_sparsity(masks),
        acc_pre=acc_pre, acc_post=acc_post, asr_pre=asr_from_predictions(pre_trig, yt, t),
        recovery_pre=rec_pre, recovery_post=rec_post, rdr_pre=compute_rdr(acc_pre, rec_pre),
        asr_x100=100 * asr, arr_x100=100 * arr, rdr_x100=100 * rdr, seconds=seconds,
    )
    return row, x_hat


def run_scenario(cfg: ExperimentConfig, model: Optional[MaskableModel] = None) -> tuple:
    """Attack (unless ``model`` is given), defend and evaluate one configuration.

    Returns ``(row, result)``.
    """
    scenario = build_scenario(cfg)
    if model is None:
        model, _ = attack(cfg, scenario)
    result, seconds = defend(cfg, model, scenario)
    row, _ = evaluate(cfg, model, result.masks, scenario, seconds=seconds)
    return row, result


def threshold_failures(cfg: ExperimentConfig, row: ResultsRow) -> list:
    out = []
    if not row.asr <= cfg.evaluation.max_asr_after:
        out.append(f"ASR {row.asr:.3f} above {cfg.evaluation.max_asr_after}")
    return out


def defense_summary(result: DefenseResult, seconds: float) -> dict:
    mask, inverse = mask_arrays(result.masks)
    return {
        "seconds": seconds,
        "effective_sparsity": effective_sparsity(result.masks),
        "rounds": {
            "init": len(result.trace.phase("init")),
            "outer": len(result.trace.phase("outer")),
        },
        "pruned_channels": [int((m < 0.5).sum()) for m in mask],
        "inverse_pruned_channels": [int((m < 0.5).sum()) for m in inverse],
        "notes": list(result.trace.notes),
        "config": asdict(result.config),
    }


def mask_snapshot_rows(masks: SelectionMaskSet) -> list:
    """Per-channel ``(layer, channel, a, s, mask, inverse)`` rows."""
    mask, inverse = mask_arrays(masks)
    rows = []
    for layer, (a, s, m, inv) in enumerate(zip(masks.a, masks.s, mask, inverse)):
        for c in range(a.shape[0]):
            rows.append((layer, c, float(a.data[c]), float(s.data[c]), float(m[c]), float(inv[c])))
    return rows


def nan_safe_equal(a: ResultsRow, b: ResultsRow, ignore=("seconds",)) -> bool:
    for name in ResultsRow.columns():
        if name in ignore:
            continue
        x, y = getattr(a, name), getattr(b, name)
        if isinstance(x, float) and np.isnan(x) and np.isnan(y):
            continue
        if x != y:
            return False
    return True
