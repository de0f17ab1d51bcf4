"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive records a :class:`Node` when at least one input requires a
gradient.  Nodes carry a global sequence number, so the recorded graph is a
tape: :func:`backward` walks the nodes reachable from the root in strict
reverse recording order and then marks them consumed.

Broadcasting is deliberately narrow.  Besides identical shapes, binary ops
accept a scalar operand, or a 1-D "channel vector" whose length matches
axis 1 of the other operand (bias over a feature map, mask over channels).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Node",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "log",
    "sum",
    "mean",
    "clamp",
    "channel_scale",
    "max_pool",
    "conv2d",
    "reshape",
]

_seq = itertools.count()
_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Set the dtype used for tensors built from python scalars/lists."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq}{', consumed' if self.consumed else ''})"


class Tensor:
    """A numpy array plus optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node(self) -> Optional[Node]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, inputs, backward_fn)
    return result


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``root``.

    Leaf gradients accumulate, so callers reset them between steps.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor")
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("root is detached from any recorded computation")
    seed = np.ones_like(root.data)
    if root._node is None:
        root.grad = seed if root.grad is None else root.grad + seed
        return

    nodes = []
    seen = set()
    stack = [root._node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        if node.consumed:
            raise TapeError(f"{node!r} was already consumed by an earlier backward")
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t._node is not None:
                stack.append(t._node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    grads = {id(root._node): seed}
    for node in nodes:
        g = grads.pop(id(node), None)
        fn = node.backward_fn
        node.backward_fn = None
        node.consumed = True
        if g is None:
            continue
        for t, tg in zip(node.inputs, fn(g)):
            if tg is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = id(t._node)
                grads[key] = tg if key not in grads else grads[key] + tg
            else:
                tg = np.asarray(tg, dtype=t.dtype)
                t.grad = tg if t.grad is None else t.grad + tg


# ---------------------------------------------------------------- broadcasting

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return "channel_b"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return "channel_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_reduce(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0,) + tuple(range(2, g.ndim)))


def _align(a: np.ndarray, b: np.ndarray, kind: str):
    if kind == "channel_b":
        return a, _channel_view(b, a.ndim)
    if kind == "channel_a":
        return _channel_view(a, b.ndim), b
    if kind == "scalar_b":
        return a, b.reshape(())
    if kind == "scalar_a":
        return a.reshape(()), b
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple, kind: str, side: str) -> np.ndarray:
    if kind == "scalar_" + side:
        return np.asarray(g.sum()).reshape(shape)
    if kind == "channel_" + side:
        return _channel_reduce(g)
    return g


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)

    def back(g):
        return (
            _reduce_to(g, a.shape, kind, "a") if a.requires_grad else None,
            _reduce_to(g, b.shape, kind, "b") if b.requires_grad else None,
        )

    return _record("add", x + y, (a, b), back)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)

    def back(g):
        return (
            _reduce_to(g * y, a.shape, kind, "a") if a.requires_grad else None,
            _reduce_to(g * x, b.shape, kind, "b") if b.requires_grad else None,
        )

    return _record("mul", x * y, (a, b), back)


def neg(a) -> Tensor:
    return mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        return (
            g @ y.T if a.requires_grad else None,
            x.T @ g if b.requires_grad else None,
        )

    return _record("matmul", x @ y, (a, b), back)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _record("relu", out, (a,), lambda g: (g * (out > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _check_axis(a: Tensor, axis: int) -> int:
    if a.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the class axis), max-subtracted."""
    axis = _check_axis(a, axis)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), back)


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _record("log", out, (a,), lambda g: (g / x,))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = a.data
    out = np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (a,), back)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data
    n = x.size if axis is None else x.shape[axis]
    out = np.asarray(x.mean(axis=axis), dtype=x.dtype)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)

    return _record("mean", out, (a,), back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Element-wise clip; the gradient passes only where ``lo <= x <= hi``."""
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: lo={lo} > hi={hi}")
    x = a.data
    out = np.clip(x, lo, hi).astype(x.dtype, copy=False)
    inside = (x >= lo) & (x <= hi)
    return _record("clamp", out, (a,), lambda g: (g * inside,))


def channel_scale(x: Tensor, m: Tensor) -> Tensor:
    """Multiply axis 1 of ``x`` by the per-channel vector ``m``."""
    if m.ndim != 1 or x.ndim < 2 or x.shape[1] != m.shape[0]:
        raise ShapeError(f"channel_scale: mask shape {m.shape} does not fit {x.shape}")
    mv = _channel_view(m.data, x.ndim)

    def back(g):
        return (
            g * mv if x.requires_grad else None,
            _channel_reduce(g * x.data) if m.requires_grad else None,
        )

    return _record("channel_scale", x.data * mv, (x, m), back)


def max_pool(a: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling over the last two axes.

    Ties route the gradient to the first maximal entry in row-major order.
    """
    if a.ndim != 4:
        raise ShapeError(f"max_pool needs (B,C,H,W), got {a.shape}")
    h, w = a.shape[2:]
    if h % size or w % size:
        raise ShapeError(f"max_pool size {size} does not divide {h}x{w}")
    x = a.data
    offsets = [(i, j) for i in range(size) for j in range(size)]
    out = x[:, :, 0::size, 0::size].copy()
    for i, j in offsets[1:]:
        np.maximum(out, x[:, :, i::size, j::size], out=out)

    def back(g):
        gx = np.zeros_like(x)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = (x[:, :, i::size, j::size] == out) & ~taken
            gx[:, :, i::size, j::size] = g * hit
            taken |= hit
        return (gx,)

    return _record("max_pool", out, (a,), back)


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """Windows of a padded channel-last batch as rows ``(B*ho*wo, kh*kw*C)``."""
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation), ``same`` or ``valid``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs (B,C,H,W) input and (O,C,kh,kw) kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[0]):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} out-channels")
    o, c, kh, kw = w.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n, _, h, wd = x.shape
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[2:]}")

    # channel-last im2col: one matmul forward, two backward
    xp = np.zeros((n, h + 2 * ph, wd + 2 * pw, c), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, kh, kw, ho, wo)
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def back(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gc = (g2 @ wm).reshape(n, ho, wo, kh, kw, c)
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i:i + ho, j:j + wo, :] += gc[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gp[:, ph:ph + h, pw:pw + wd, :].transpose(0, 3, 1, 2))
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, back)


def reshape(a: Tensor, shape) -> Tensor:
    x = a.data
    return _record("reshape", x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))
