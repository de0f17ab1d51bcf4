"""Central finite-difference checker shared by the gradient tests."""

import numpy as np

from ims import autodiff as ad

STEP = 1e-6
REL_TOL = 1e-4


def numeric_grad(fn, tensor, coords, step=STEP):
    out = []
    for idx in coords:
        orig = tensor.data[idx]
        tensor.data[idx] = orig + step
        with ad.no_grad():
            up = float(fn().data)
        tensor.data[idx] = orig - step
        with ad.no_grad():
            down = float(fn().data)
        tensor.data[idx] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)


def pick_coords(shape, n, rng):
    """``n`` coordinates (with repeats only when the tensor is small)."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=n, replace=size < n)
    return [np.unravel_index(i, shape) for i in flat]


def relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return np.abs(analytic - numeric) / scale


def check(fn, tensors, n_coords=100, seed=0, step=STEP):
    """Compare backward against finite differences on ``n_coords`` entries per tensor.

    Returns the worst relative error over all checked coordinates.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    root = fn()
    ad.backward(root)
    worst = 0.0
    for t in tensors:
        coords = pick_coords(t.shape, n_coords, rng)
        analytic = np.array([t.grad[c] for c in coords])
        numeric = numeric_grad(fn, t, coords, step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def weighted_sum(out, seed=1):
    """Scalarise ``out`` with fixed random weights so every entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, ad.Tensor(w, dtype=out.dtype)))
