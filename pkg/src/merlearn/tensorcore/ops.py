"""Differentiable primitives.

Each vector-Jacobian product is written with these same primitives, so it is
recorded whenever a backward pass runs with ``create_graph=True``.
Binary elementwise ops require equal shapes; the only implicit broadcast is
a 0-d tensor (or Python number) against any shape.
"""

from __future__ import annotations

import weakref
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import expit

from merlearn.errors import DimensionError
from merlearn.tensorcore.tensor import Tensor, as_tensor, make

# -- shape plumbing ---------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise DimensionError(f"{name}: rank mismatch, {a.shape} vs {b.shape}")
    for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n:
            raise DimensionError(f"{name}: axis {axis} mismatch, {m} vs {n}")


def _align(a, b, name: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b
    if a.ndim == 0:
        return broadcast_to(a, b.shape), b
    if b.ndim == 0:
        return a, broadcast_to(b, a.shape)
    _check_same(a, b, name)
    return a, b


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape).copy()
    src = x.shape
    return make(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


def sum_to(x, shape) -> Tensor:
    """Inverse of numpy broadcasting: sum ``x`` down to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    data = data.reshape(shape)
    src = x.shape
    return make(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    data = x.data.reshape(shape)
    return make(data, (x,), lambda g: (reshape(g, src),), "reshape")


def flatten(x) -> Tensor:
    return reshape(x, (-1,))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)
    return make(data, (x,), lambda g: (transpose(g, inv),), "transpose")


def take(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"take: range {start}:{stop} outside axis {axis} of extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    data = x.data[tuple(index)]
    extent = x.shape[axis]
    return make(data, (x,), lambda g: (place(g, axis, start, extent),), "take")


def place(x, axis: int, start: int, extent: int) -> Tensor:
    """Zero tensor of extent ``extent`` along ``axis`` with ``x`` at ``start``."""
    x = as_tensor(x)
    shape = list(x.shape)
    n = shape[axis]
    shape[axis] = extent
    data = np.zeros(shape)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + n)
    data[tuple(index)] = x.data
    return make(data, (x,), lambda g: (take(g, axis, start, start + n),), "place")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise DimensionError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for ax in range(t.ndim):
            if ax != axis and t.shape[ax] != ts[0].shape[ax]:
                raise DimensionError(f"concat: axis {ax} mismatch, {ts[0].shape[ax]} vs {t.shape[ax]}")
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(take(g, axis, int(bounds[i]), int(bounds[i + 1])) for i in range(len(ts)))

    return make(data, ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def gather_flat(x, index: np.ndarray) -> Tensor:
    """``x.ravel()[index]`` with an integer index array of any shape."""
    x = as_tensor(x)
    src = x.shape
    data = x.data.reshape(-1)[index]
    return make(data, (x,), lambda g: (scatter_flat(g, index, src),), "gather_flat")


def scatter_flat(x, index: np.ndarray, shape) -> Tensor:
    """Adjoint of :func:`gather_flat`: sum ``x`` into zeros of ``shape``."""
    x = as_tensor(x)
    size = int(np.prod(shape))
    data = np.bincount(index.reshape(-1), weights=x.data.reshape(-1), minlength=size).reshape(shape)
    return make(data, (x,), lambda g: (gather_flat(g, index),), "scatter_flat")


def pad2d(x, p: int) -> Tensor:
    x = as_tensor(x)
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    data = np.pad(x.data, width)
    return make(data, (x,), lambda g: (crop2d(g, p),), "pad2d")


def crop2d(x, p: int) -> Tensor:
    x = as_tensor(x)
    if p == 0:
        return x
    data = x.data[..., p:-p, p:-p]
    return make(data, (x,), lambda g: (pad2d(g, p),), "crop2d")


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _align(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _align(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _align(a, b, "mul")
    return make(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def div(a, b) -> Tensor:
    a, b = _align(a, b, "div")

    def vjp(g):
        ga = div(g, b)
        return ga, neg(div(mul(ga, a), b))

    return make(a.data / b.data, (a, b), vjp, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make(x.data * x.data, (x,), lambda g: (mul(g, mul(x, 2.0)),), "square")


def _self_ref(fn):
    """Build an op whose VJP needs its own output without a reference cycle."""
    ref = {}

    def vjp(g):
        return fn(g, ref["out"]())

    return ref, vjp


def exp(x) -> Tensor:
    x = as_tensor(x)
    ref, vjp = _self_ref(lambda g, y: (mul(g, y),))
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    out = make(data, (x,), vjp, "exp")
    ref["out"] = weakref.ref(out)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise DimensionError("log: input must be positive")
    return make(np.log(x.data), (x,), lambda g: (div(g, x),), "log")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    ref, vjp = _self_ref(lambda g, y: (mul(g, sub(1.0, square(y))),))
    out = make(np.tanh(x.data), (x,), vjp, "tanh")
    ref["out"] = weakref.ref(out)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    ref, vjp = _self_ref(lambda g, y: (mul(g, mul(y, sub(1.0, y))),))
    out = make(expit(x.data), (x,), vjp, "sigmoid")
    ref["out"] = weakref.ref(out)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = Tensor((x.data > 0).astype(np.float64))
    return make(x.data * mask.data, (x,), lambda g: (mul(g, mask),), "relu")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = Tensor(np.sign(x.data))
    return make(np.abs(x.data), (x,), lambda g: (mul(g, sign),), "abs")


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = Tensor((x.data > floor).astype(np.float64))
    return make(np.maximum(x.data, floor), (x,), lambda g: (mul(g, mask),), "clamp_min")


def safe_reciprocal(x) -> Tensor:
    """``1/x`` where ``x != 0`` and 0 elsewhere (a zero subgradient)."""
    x = as_tensor(x)
    nz = x.data != 0
    data = np.divide(1.0, x.data, out=np.zeros_like(x.data), where=nz)
    ref, vjp = _self_ref(lambda g, y: (neg(mul(g, square(y))),))
    out = make(data, (x,), vjp, "safe_reciprocal")
    ref["out"] = weakref.ref(out)
    return out


def sqrt(x) -> Tensor:
    """Square root with a zero subgradient at 0."""
    x = as_tensor(x)
    if (x.data < 0).any():
        raise DimensionError("sqrt: input must be non-negative")
    ref, vjp = _self_ref(lambda g, y: (mul(mul(g, safe_reciprocal(y)), 0.5),))
    out = make(np.sqrt(x.data), (x,), vjp, "sqrt")
    ref["out"] = weakref.ref(out)
    return out


# -- reductions and linear algebra -----------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    src = x.shape
    kept = np.sum(x.data, axis=axis, keepdims=True)
    data = kept if keepdims else np.sum(x.data, axis=axis)
    kshape = kept.shape

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), src),)

    return make(data, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch, {a.shape[1]} vs {b.shape[0]}")
    return make(a.data @ b.data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


# -- cached index maps ------------------------------------------------------


@lru_cache(maxsize=64)
def im2col_index(batch: int, channels: int, height: int, width: int, k: int, stride: int) -> np.ndarray:
    """Flat indices into a [B,C,H,W] array giving [B*H'*W', C*k*k] patches."""
    oh = (height - k) // stride + 1
    ow = (width - k) // stride + 1
    b = np.arange(batch)[:, None, None, None, None, None]
    i = np.arange(oh)[None, :, None, None, None, None]
    j = np.arange(ow)[None, None, :, None, None, None]
    c = np.arange(channels)[None, None, None, :, None, None]
    ki = np.arange(k)[None, None, None, None, :, None]
    kj = np.arange(k)[None, None, None, None, None, :]
    idx = (((b * channels + c) * height + i * stride + ki) * width) + j * stride + kj
    idx = idx.reshape(batch * oh * ow, channels * k * k)
    idx.setflags(write=False)
    return idx
