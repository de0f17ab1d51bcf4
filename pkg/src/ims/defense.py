"""Bi-level mask learning: initialisation, trigger synthesis, mask refinement.

The backdoored weights are never touched; only the raw masks and selection
vectors move.  Probability bundles used below (``x_hat = x + delta``):

    p          f(x)                 unmasked, clean input
    p_mask     f(x, mask)           p_inv      f(x, inverse)
    p_hat      f(x_hat)             unmasked, perturbed input
    p_hat_mask f(x_hat, mask)       p_hat_inv  f(x_hat, inverse)
"""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import (
    DEFAULT_A_INIT,
    DEFAULT_K,
    DEFAULT_S_INIT,
    SelectionMaskSet,
    build_masks,
    effective_sparsity,
    mask_arrays,
)
from .model import predict
from .optimize import AdamW, clip_params, l1_penalty, loss_agree, loss_disagree

logger = logging.getLogger(__name__)

TERM_NAMES = (
    "agree_clean_mask",
    "agree_pert_mask",
    "disagree_pert_inv",
    "agree_pert_inv",
    "disagree_clean_inv",
)


@dataclass
class DefenseConfig:
    r1: int = 200
    r2: int = 400
    r3: int = 20
    epsilon: float = 1.0
    lambda_final: float = 10.0
    switch_point: float = 0.5
    k: float = DEFAULT_K
    lr_mask: float = 0.01
    lr_delta: float = 0.02
    batch_size: int = 64
    seed: int = 1
    skip_mask_init: bool = False
    a_init: float = DEFAULT_A_INIT
    s_init: float = DEFAULT_S_INIT
    early_stop_tol: Optional[float] = None
    early_stop_patience: int = 20

    def __post_init__(self):
        for name in ("r1", "r2", "r3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.skip_mask_init and self.r1 < 1:
            raise ValueError("r1 must be >= 1 unless mask initialisation is skipped")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lambda_final < 0:
            raise ValueError(f"lambda_final must be >= 0, got {self.lambda_final}")
        if not 0.0 <= self.switch_point <= 1.0:
            raise ValueError(f"switch_point must be in [0, 1], got {self.switch_point}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_mask <= 0 or self.lr_delta <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.a_init <= 1.0 and 0.0 <= self.s_init <= 1.0):
            raise ValueError("a_init and s_init must lie in [0, 1]")

    def lambda_at(self, outer_round: int) -> float:
        """Sparsity weight for a zero-based outer round."""
        return 0.0 if outer_round < self.switch_point * self.r2 else self.lambda_final


@dataclass
class PerturbationBatch:
    delta: np.ndarray
    epsilon: float
    objective: float = math.nan


@dataclass
class SixProbeOutputs:
    p: Tensor
    p_mask: Tensor
    p_hat_mask: Tensor
    p_hat: Tensor
    p_inv: Tensor
    p_hat_inv: Tensor


@dataclass
class TraceRecord:
    round: int
    phase: str
    loss_total: float
    agree_clean_mask: float = 0.0
    agree_pert_mask: float = 0.0
    disagree_pert_inv: float = 0.0
    agree_pert_inv: float = 0.0
    disagree_clean_inv: float = 0.0
    inner_loss: float = math.nan
    lam: float = 0.0
    effective_sparsity: float = 0.0
    seconds: float = 0.0


CSV_COLUMNS = ("round", "phase", "loss_total") + TERM_NAMES + ("lambda", "effective_sparsity", "seconds")


@dataclass
class DefenseTrace:
    records: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def phase(self, name: str) -> list:
        return [r for r in self.records if r.phase == name]

    def write_csv(self, path, lock: Optional[threading.Lock] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        for r in self.records:
            d = asdict(r)
            d["lambda"] = d.pop("lam")
            d.pop("inner_loss")
            rows.append({k: d[k] for k in CSV_COLUMNS})
        with (lock or _NullLock()):
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                writer.writerows(rows)
        return path


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _const(model, x: np.ndarray, masks=None) -> Tensor:
    with ad.no_grad():
        return model.forward(Tensor(x), masks).detach()


def _sample(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(n, batch), replace=False))


def _check_frozen(model) -> None:
    params = getattr(model, "params", {})
    if any(t.requires_grad for t in params.values()):
        raise ValueError("model parameters must not require gradients during the defense")


def init_objective(model, masks: SelectionMaskSet, x: np.ndarray, p: Tensor, lam: float) -> tuple:
    pair = build_masks(masks)
    xt = Tensor(x)
    p_mask = model.forward(xt, pair.mask)
    p_inv = model.forward(xt, pair.inverse)
    terms = {
        "agree_clean_mask": loss_agree(p_mask, p),
        "disagree_clean_inv": loss_disagree(p_inv, p),
    }
    total = ad.add(ad.add(terms["agree_clean_mask"], terms["disagree_clean_inv"]), l1_penalty(masks.s, lam))
    return total, terms


def mask_init(model, masks: SelectionMaskSet, x_pool: np.ndarray, cfg: DefenseConfig,
              rng: Optional[np.random.Generator] = None, optimizer: Optional[AdamW] = None,
              trace: Optional[DefenseTrace] = None) -> tuple:
    """Fit masks so the mask keeps clean predictions and the inverse breaks them.

    Runs ``cfg.r1`` rounds (none when ``cfg.skip_mask_init``) at
    ``lambda = cfg.lambda_final``.  Returns ``(masks, trace)``; ``masks``
    is updated in place.
    """
    _check_frozen(model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    trace = trace if trace is not None else DefenseTrace()
    if cfg.skip_mask_init:
        trace.notes.append("mask initialisation skipped")
        return masks, trace
    optimizer = optimizer or AdamW(masks.parameters(), lr=cfg.lr_mask)
    lam = cfg.lambda_final
    for i in range(cfg.r1):
        t0 = time.perf_counter()
        x = x_pool[_sample(rng, len(x_pool), cfg.batch_size)]
        p = _const(model, x)
        masks.zero_grad()
        total, terms = init_objective(model, masks, x, p, lam)
        ad.backward(total)
        optimizer.step()
        masks.clip_()
        trace.append(TraceRecord(
            round=i, phase="init", loss_total=total.item(),
            **{k: v.item() for k, v in terms.items()},
            lam=lam, effective_sparsity=effective_sparsity(masks), seconds=time.perf_counter() - t0,
        ))
        if _should_stop(trace.phase("init"), cfg):
            trace.notes.append(f"mask initialisation stopped early after {i + 1} rounds")
            break
    return masks, trace


def inner_objective(model, inverse, x: np.ndarray, delta: Tensor, p: Tensor) -> Tensor:
    """Disagree(p_hat, p) + Agree(p_hat, p_hat_inv) for perturbation ``delta``."""
    x_hat = ad.add(Tensor(x, dtype=delta.dtype), delta)
    p_hat = model.forward(x_hat)
    p_hat_inv = model.forward(x_hat, inverse)
    return ad.add(loss_disagree(p_hat, p), loss_agree(p_hat, p_hat_inv))


def inner_solve(model, masks: SelectionMaskSet, x: np.ndarray, cfg: DefenseConfig,
                p: Optional[Tensor] = None) -> PerturbationBatch:
    """Synthesize per-sample perturbations with the masks held fixed.

    ``delta`` starts at zero and takes ``cfg.r3`` AdamW steps, each followed
    by projection onto the l-inf ball of radius ``cfg.epsilon``.
    """
    x = np.asarray(x)
    p = p if p is not None else _const(model, x)
    _, inverse = mask_arrays(masks)
    inverse = [Tensor(v) for v in inverse]
    delta = Tensor(np.zeros_like(x), requires_grad=True)
    opt = AdamW([("delta", delta)], lr=cfg.lr_delta)
    for _ in range(cfg.r3):
        delta.grad = None
        ad.backward(inner_objective(model, inverse, x, delta, p))
        opt.step()
        clip_params(delta, -cfg.epsilon, cfg.epsilon)
    with ad.no_grad():
        objective = inner_objective(model, inverse, x, Tensor(delta.data), p).item()
    return PerturbationBatch(delta.data.copy(), cfg.epsilon, objective)


def six_probe(model, masks: SelectionMaskSet, x: np.ndarray, delta: np.ndarray,
              p: Optional[Tensor] = None) -> tuple:
    """All six probability bundles; mask-dependent ones stay on the tape."""
    pair = build_masks(masks)
    xt = Tensor(x)
    x_hat = Tensor(x + delta)
    probes = SixProbeOutputs(
        p=p if p is not None else _const(model, x),
        p_mask=model.forward(xt, pair.mask),
        p_hat_mask=model.forward(x_hat, pair.mask),
        p_hat=_const(model, x + delta),
        p_inv=model.forward(xt, pair.inverse),
        p_hat_inv=model.forward(x_hat, pair.inverse),
    )
    return probes, pair


def outer_objective(probes: SixProbeOutputs, masks: SelectionMaskSet, lam: float) -> tuple:
    terms = {
        "agree_clean_mask": loss_agree(probes.p_mask, probes.p),
        "agree_pert_mask": loss_agree(probes.p_hat_mask, probes.p),
        "disagree_pert_inv": loss_disagree(probes.p_hat_inv, probes.p),
        "agree_pert_inv": loss_agree(probes.p_hat, probes.p_hat_inv),
        "disagree_clean_inv": loss_disagree(probes.p_inv, probes.p),
    }
    total = None
    for name in TERM_NAMES:
        total = terms[name] if total is None else ad.add(total, terms[name])
    total = ad.add(total, l1_penalty(masks.s, lam))
    return total, terms


def outer_step(model, masks: SelectionMaskSet, x: np.ndarray, delta: np.ndarray, cfg: DefenseConfig,
               lam: float, optimizer: Optional[AdamW] = None, p: Optional[Tensor] = None) -> tuple:
    """One AdamW step on the masks against the five-term loss plus penalty.

    Returns ``(total, terms)`` as floats, evaluated before the update.
    """
    optimizer = optimizer or AdamW(masks.parameters(), lr=cfg.lr_mask)
    masks.zero_grad()
    probes, _ = six_probe(model, masks, x, delta, p)
    total, terms = outer_objective(probes, masks, lam)
    ad.backward(total)
    optimizer.step()
    masks.clip_()
    return total.item(), {k: v.item() for k, v in terms.items()}


def _should_stop(records: list, cfg: DefenseConfig) -> bool:
    if cfg.early_stop_tol is None or len(records) <= cfg.early_stop_patience:
        return False
    recent = [r.loss_total for r in records[-(cfg.early_stop_patience + 1):]]
    for prev, cur in zip(recent, recent[1:]):
        if abs(cur - prev) > cfg.early_stop_tol * max(abs(prev), 1e-12):
            return False
    return True


@dataclass
class DefenseResult:
    masks: SelectionMaskSet
    defended: Callable
    trace: DefenseTrace
    config: DefenseConfig

    @property
    def mask(self) -> list:
        return mask_arrays(self.masks)[0]

    @property
    def inverse(self) -> list:
        return mask_arrays(self.masks)[1]


def defended_forward(model, masks: SelectionMaskSet) -> Callable:
    """Closure ``x -> f(x, mask)`` with the mask frozen at call time."""
    mask = [Tensor(m) for m in mask_arrays(masks)[0]]

    def fn(x):
        return model.forward(x if isinstance(x, Tensor) else Tensor(x), mask)

    return fn


def run_ims(model, x_pool: np.ndarray, cfg: DefenseConfig, masks: Optional[SelectionMaskSet] = None) -> DefenseResult:
    """Full defense: mask initialisation then ``cfg.r2`` bi-level rounds.

    ``x_pool`` holds the defender's clean images; labels are not needed.
    """
    x_pool = np.asarray(x_pool, dtype=np.float32)
    if len(x_pool) == 0:
        raise ValueError("the mitigation set is empty")
    _check_frozen(model)
    rng = np.random.default_rng(cfg.seed)
    if masks is None:
        masks = SelectionMaskSet.init_for(model.layer_channels, cfg.a_init, cfg.s_init, cfg.k)
    optimizer = AdamW(masks.parameters(), lr=cfg.lr_mask)
    trace = DefenseTrace()
    try:
        mask_init(model, masks, x_pool, cfg, rng=rng, optimizer=optimizer, trace=trace)
        if cfg.r2 == 0:
            trace.notes.append("no outer rounds: defended model is the initialised mask")
        for i in range(cfg.r2):
            t0 = time.perf_counter()
            lam = cfg.lambda_at(i)
            x = x_pool[_sample(rng, len(x_pool), cfg.batch_size)]
            p = _const(model, x)
            pert = inner_solve(model, masks, x, cfg, p=p)
            total, terms = outer_step(model, masks, x, pert.delta, cfg, lam, optimizer=optimizer, p=p)
            trace.append(TraceRecord(
                round=i, phase="outer", loss_total=total, **terms, inner_loss=pert.objective,
                lam=lam, effective_sparsity=effective_sparsity(masks), seconds=time.perf_counter() - t0,
            ))
            if lam == cfg.lambda_final and _should_stop(
                [r for r in trace.phase("outer") if r.lam == lam], cfg
            ):
                trace.notes.append(f"outer loop stopped early after {i + 1} rounds")
                break
    except Exception:
        logger.exception("defense failed after %d trace records", len(trace.records))
        raise
    return DefenseResult(masks, defended_forward(model, masks), trace, cfg)


def synthesize_perturbations(model, masks: SelectionMaskSet, x: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    """Perturbed inputs ``clip(x + delta, 0, 1)`` for every row of ``x``."""
    out = []
    for start in range(0, len(x), cfg.batch_size):
        xb = np.asarray(x[start:start + cfg.batch_size], dtype=np.float32)
        pert = inner_solve(model, masks, xb, cfg)
        out.append(np.clip(xb + pert.delta, 0.0, 1.0))
    return np.concatenate(out)


def target_proportion(fn: Callable, x_hat: np.ndarray, target: int) -> float:
    """Fraction of ``x_hat`` that ``fn`` classifies as ``target``."""
    if len(x_hat) == 0:
        raise ValueError("perturbed set is empty")
    return float((predict(fn, x_hat) == target).mean())


def config_fields() -> list:
    return [f.name for f in fields(DefenseConfig)]
