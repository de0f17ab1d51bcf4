"""Selective invertible channel masks.

Each maskable layer owns a raw mask ``a`` and a selection vector ``s``, both
in ``[0, 1]``.  With ``u = k * (a - 0.5)`` the effective mask and its
inverse are::

    mask    = sigmoid(u)  + s * sigmoid(-u)
    inverse = sigmoid(-u) + s * sigmoid(u)

For ``s = 1`` both equal 1 (shared channel).  For ``s = 0`` they are exact
complements, and as ``k`` grows they become a hard partition at 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

DEFAULT_K = 20.0
# a = 0.5 sits on the sigmoid's steepest point and favours neither the mask
# nor the inverse; with s = 1 both still start at exactly 1
DEFAULT_A_INIT = 0.5
DEFAULT_S_INIT = 1.0


@dataclass
class SelectionMaskSet:
    a: list
    s: list
    k: float = DEFAULT_K

    def __post_init__(self):
        if len(self.a) != len(self.s):
            raise ShapeError(f"{len(self.a)} raw masks but {len(self.s)} selection vectors")
        for i, (a, s) in enumerate(zip(self.a, self.s)):
            if a.ndim != 1 or a.shape != s.shape:
                raise ShapeError(f"layer {i}: raw mask {a.shape} and selection {s.shape} differ")

    @classmethod
    def init_for(
        cls,
        channels: Iterable[int],
        a_init: float = DEFAULT_A_INIT,
        s_init: float = DEFAULT_S_INIT,
        k: float = DEFAULT_K,
        dtype=np.float32,
    ) -> "SelectionMaskSet":
        channels = list(channels)
        a = [Tensor(np.full(c, a_init, dtype=dtype), requires_grad=True) for c in channels]
        s = [Tensor(np.full(c, s_init, dtype=dtype), requires_grad=True) for c in channels]
        return cls(a, s, k)

    @classmethod
    def from_arrays(cls, a: Sequence, s: Sequence, k: float = DEFAULT_K, requires_grad: bool = True):
        return cls(
            [Tensor(np.asarray(v), requires_grad=requires_grad) for v in a],
            [Tensor(np.asarray(v), requires_grad=requires_grad) for v in s],
            k,
        )

    @property
    def num_layers(self) -> int:
        return len(self.a)

    @property
    def layer_channels(self) -> list:
        return [t.shape[0] for t in self.a]

    @property
    def total_entries(self) -> int:
        return int(sum(t.size for t in self.s))

    def parameters(self) -> list:
        named = [(f"a{i}", t) for i, t in enumerate(self.a)]
        named += [(f"s{i}", t) for i, t in enumerate(self.s)]
        return named

    def clip_(self) -> None:
        """Project every entry back into [0, 1] in place."""
        from .optimize import clip_params

        for t in self.a + self.s:
            t.data = clip_params(t.data, 0.0, 1.0)

    def zero_grad(self) -> None:
        for t in self.a + self.s:
            t.grad = None

    def snapshot(self) -> "SelectionMaskSet":
        return SelectionMaskSet.from_arrays(
            [t.data.copy() for t in self.a], [t.data.copy() for t in self.s], self.k, requires_grad=False
        )

    def check_range(self) -> None:
        for name, t in self.parameters():
            if t.size and (t.data.min() < 0 or t.data.max() > 1):
                raise ValueError(f"{name} has entries outside [0, 1]")


@dataclass
class EffectiveMaskPair:
    mask: list
    inverse: list

    def arrays(self) -> tuple:
        return [m.data for m in self.mask], [m.data for m in self.inverse]


def build_masks(params: SelectionMaskSet) -> EffectiveMaskPair:
    """Effective mask and inverse per layer; differentiable in ``a`` and ``s``."""
    k = float(params.k)
    if not k > 0:
        raise ValueError(f"scale k must be positive, got {params.k}")
    mask, inverse = [], []
    for a, s in zip(params.a, params.s):
        centred = ad.add(a, -0.5)
        keep = ad.sigmoid(ad.mul(centred, k))
        drop = ad.sigmoid(ad.mul(centred, -k))
        mask.append(ad.add(keep, ad.mul(s, drop)))
        inverse.append(ad.add(drop, ad.mul(s, keep)))
    return EffectiveMaskPair(mask, inverse)


def lemma1_residual(pair: EffectiveMaskPair, params: SelectionMaskSet) -> tuple:
    """Per-layer ``|mask + inverse - 1|`` and the bound margin ``2s - residual``."""
    residuals, margins = [], []
    for m, inv, s in zip(pair.mask, pair.inverse, params.s):
        r = np.abs(m.data + inv.data - 1.0)
        residuals.append(r)
        margins.append(2.0 * s.data - r)
    return residuals, margins


def effective_sparsity(params: SelectionMaskSet) -> float:
    """Fraction of selection entries strictly below 0.5."""
    total = params.total_entries
    if total == 0:
        raise ValueError("selection set is empty")
    below = sum(int((s.data < 0.5).sum()) for s in params.s)
    return below / total


def mask_arrays(params: SelectionMaskSet) -> tuple:
    """Effective mask/inverse as plain arrays, computed without recording."""
    with ad.no_grad():
        return build_masks(params).arrays()


def export_masks(params: SelectionMaskSet, path) -> Path:
    """Write per-layer ``a``, ``s``, mask and inverse as JSON."""
    mask, inverse = mask_arrays(params)
    doc = {
        "k": float(params.k),
        "layers": [
            {
                "a": a.data.tolist(),
                "s": s.data.tolist(),
                "a_prime": m.tolist(),
                "a_bar_prime": inv.tolist(),
            }
            for a, s, m, inv in zip(params.a, params.s, mask, inverse)
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def load_masks(path, dtype=np.float32) -> SelectionMaskSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    a = [np.asarray(layer["a"], dtype=dtype) for layer in doc["layers"]]
    s = [np.asarray(layer["s"], dtype=dtype) for layer in doc["layers"]]
    return SelectionMaskSet.from_arrays(a, s, doc["k"], requires_grad=False)


def heatmap_grid(k: float = DEFAULT_K, steps: int = 51, dtype=np.float64) -> np.ndarray:
    """Rows of ``(a, s, mask, inverse)`` over a uniform ``[0,1]^2`` grid."""
    grid = np.linspace(0.0, 1.0, steps, dtype=dtype)
    a, s = np.meshgrid(grid, grid, indexing="ij")
    params = SelectionMaskSet.from_arrays([a.ravel()], [s.ravel()], k, requires_grad=False)
    mask, inverse = mask_arrays(params)
    return np.column_stack([a.ravel(), s.ravel(), mask[0], inverse[0]])


def identity_masks(channels: Iterable[int], dtype=np.float32) -> SelectionMaskSet:
    """A set whose mask and inverse are both all-ones (nothing selected)."""
    return SelectionMaskSet.init_for(channels, a_init=DEFAULT_A_INIT, s_init=1.0, dtype=dtype)
