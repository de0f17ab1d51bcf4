"""Mitigation metrics: attack success, accuracy reduction and recovery deficit.

All functions are pure.  Ratios come back as fractions; use :func:`x100`
for the percentage-style numbers common in result tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .model import predict


@dataclass(frozen=True)
class EvalInputs:
    alpha_p: float
    alpha_s: float
    eta_s: float
    asr: float
    target: int

    def __post_init__(self):
        for name in ("alpha_p", "alpha_s", "eta_s", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def arr(self) -> float:
        return compute_arr(self.alpha_p, self.alpha_s)

    @property
    def rdr(self) -> float:
        return compute_rdr(self.alpha_p, self.eta_s)


def asr_from_predictions(pred, y_true, target: int) -> float:
    """Share of non-target samples predicted as ``target``."""
    pred = np.asarray(pred)
    y_true = np.asarray(y_true)
    if pred.shape != y_true.shape:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} predictions for {len(y_true)} labels")
    keep = y_true != target
    if not keep.any():
        raise ValueError("every sample belongs to the target class; nothing left to score")
    return float((pred[keep] == target).mean())


def compute_asr(fn: Callable, x_triggered, y_true, target: int) -> float:
    """Attack success rate of ``fn`` on triggered inputs.

    Samples whose true label is already ``target`` are excluded.
    """
    y_true = np.asarray(y_true)
    if not (y_true != target).any():
        raise ValueError("every sample belongs to the target class; nothing left to score")
    return asr_from_predictions(predict(fn, x_triggered), y_true, target)


def recovery_from_predictions(pred, y_true) -> float:
    pred = np.asarray(pred)
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ValueError("empty evaluation set")
    return float((pred == y_true).mean())


def compute_recovery(fn: Callable, x_triggered, y_true) -> float:
    """Accuracy against true labels on triggered inputs (all samples kept)."""
    return recovery_from_predictions(predict(fn, x_triggered), y_true)


def _one_minus_ratio(num: float, den: float) -> float:
    # rational arithmetic on the shortest decimal form, so 0.8 and 0.84
    # give -0.05 rather than -0.04999999999999982
    if den == 0:
        raise ValueError("pre-mitigation accuracy is zero")
    return float(1 - Fraction(repr(float(num))) / Fraction(repr(float(den))))


def compute_arr(alpha_p: float, alpha_s: float) -> float:
    """Relative drop in clean accuracy; negative when mitigation helps."""
    return _one_minus_ratio(alpha_s, alpha_p)


def compute_rdr(alpha_p: float, eta_s: float) -> float:
    """Share of the clean accuracy not recovered on triggered inputs."""
    return _one_minus_ratio(eta_s, alpha_p)


def x100(value: float) -> float:
    return 100.0 * value
