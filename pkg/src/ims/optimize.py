"""Agreement/disagreement losses, the selection sparsity penalty and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import PoisonedGradientError, ShapeError

LOG_EPS = 1e-7


def inner_product(q_hat: Tensor, q: Tensor) -> Tensor:
    """Row-wise dot product of two probability batches, shape ``(batch,)``."""
    if q_hat.shape != q.shape:
        raise ShapeError(f"probability shapes differ: {q_hat.shape} vs {q.shape}")
    if q_hat.ndim == 1:
        return ad.sum(ad.mul(q_hat, q))
    if q_hat.ndim != 2:
        raise ShapeError(f"expected (batch, classes) probabilities, got {q_hat.shape}")
    return ad.sum(ad.mul(q_hat, q), axis=1)


def _neg_log_mean(arg: Tensor) -> Tensor:
    return ad.neg(ad.mean(ad.log(ad.clamp(arg, LOG_EPS, 1.0 - LOG_EPS))))


def loss_agree(q_hat: Tensor, q: Tensor) -> Tensor:
    """``-log <q_hat, q>`` averaged over the batch (clamped away from 0 and 1)."""
    return _neg_log_mean(inner_product(q_hat, q))


def loss_disagree(q_hat: Tensor, q: Tensor) -> Tensor:
    """``-log(1 - <q_hat, q>)`` averaged over the batch."""
    return _neg_log_mean(ad.add(ad.neg(inner_product(q_hat, q)), 1.0))


def l1_penalty(selection: Sequence[Tensor], lam: float) -> Tensor:
    """``lam * sum|s| / |S|`` over all selection vectors.

    Entries are kept in [0, 1] by clipping, so ``|s| == s`` and the
    penalty is linear in ``s``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    selection = list(selection)
    total = sum(t.size for t in selection)
    if total == 0:
        raise ValueError("selection set is empty")
    acc = None
    for t in selection:
        # |s| on the tape: s >= 0 after clipping, but stay correct if not
        signs = np.sign(t.data)
        term = ad.sum(ad.mul(t, Tensor(signs, dtype=t.dtype)))
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(acc, float(lam) / total)


def clip_params(x, lo: float, hi: float):
    """Element-wise projection onto ``[lo, hi]``; never recorded."""
    if lo > hi:
        raise ValueError(f"clip bounds reversed: lo={lo} > hi={hi}")
    if isinstance(x, Tensor):
        x.data = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
        return x
    arr = np.asarray(x)
    return np.clip(arr, lo, hi).astype(arr.dtype, copy=False)


@dataclass
class OptimizerState:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay over a list of named tensors.

    Gradients are read from each tensor's ``.grad`` unless passed explicitly.
    Tensors without a gradient are left untouched.
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for name, t in self.params:
            self.state.exp_avg[name] = np.zeros_like(t.data)
            self.state.exp_avg_sq[name] = np.zeros_like(t.data)

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self, grads: Optional[dict] = None) -> None:
        st = self.state
        updates = []
        for name, t in self.params:
            g = t.grad if grads is None else grads.get(name)
            if g is None:
                continue
            g = np.asarray(g)
            if g.shape != t.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {t.shape}")
            if not np.all(np.isfinite(g)):
                raise PoisonedGradientError(name)
            updates.append((name, t, g))

        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, t, g in updates:
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = t.data
            if st.weight_decay:
                data = data * (1.0 - st.lr * st.weight_decay)
            denom = np.sqrt(v / bc2) + st.eps
            t.data = (data - (st.lr / bc1) * m / denom).astype(t.dtype, copy=False)
