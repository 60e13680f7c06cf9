"""Composite layers and losses built from the primitives in :mod:`ops`."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from merlearn.errors import DimensionError, LabelError
from merlearn.tensorcore import ops
from merlearn.tensorcore.tensor import Tensor, as_tensor


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x [B, I], weight [I, O], bias [O]."""
    out = ops.matmul(x, weight)
    if bias is not None:
        out = ops.add(out, ops.broadcast_to(bias, out.shape))
    return out


def conv2d(input, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-d cross-correlation of ``input`` [B,C,H,W] with ``kernel`` [F,C,k,k].

    Output is [B, F, H', W'] with H' = floor((H + 2p - k) / stride) + 1.
    """
    x, w = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [B,C,H,W], got rank {x.ndim}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [F,C,k,k], got rank {w.ndim}")
    B, C, H, W = x.shape
    F, Ck, k, k2 = w.shape
    if Ck != C:
        raise DimensionError(f"conv2d: channel axis mismatch, input C={C} vs kernel C={Ck}")
    if k != k2:
        raise DimensionError(f"conv2d: kernel width axis {k2} differs from height axis {k}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} or padding={padding}")
    if k > H + 2 * padding:
        raise DimensionError(f"conv2d: height axis {H}+2*{padding} smaller than kernel {k}")
    if k > W + 2 * padding:
        raise DimensionError(f"conv2d: width axis {W}+2*{padding} smaller than kernel {k}")

    xp = ops.pad2d(x, padding)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    oh = (Hp - k) // stride + 1
    ow = (Wp - k) // stride + 1
    idx = ops.im2col_index(B, C, Hp, Wp, k, stride)
    cols = ops.gather_flat(xp, idx)                                  # [B*oh*ow, C*k*k]
    out = ops.matmul(cols, ops.transpose(ops.reshape(w, (F, C * k * k))))
    if bias is not None:
        out = ops.add(out, ops.broadcast_to(bias, out.shape))
    out = ops.reshape(out, (B, oh, ow, F))
    return ops.transpose(out, (0, 3, 1, 2))


def lstm_cell(x, h_prev, c_prev, weights: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step with gates ordered (input, forget, cell, output).

    ``weights`` holds ``w_ih`` [I, 4H], ``w_hh`` [H, 4H] and ``bias`` [4H].
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    w_ih, w_hh, b = weights["w_ih"], weights["w_hh"], weights["bias"]
    hidden = w_hh.shape[0]
    if w_hh.shape != (hidden, 4 * hidden):
        raise DimensionError(f"lstm_cell: w_hh must be [H, 4H], got {w_hh.shape}")
    if w_ih.shape[1] != 4 * hidden or b.shape != (4 * hidden,):
        raise DimensionError(f"lstm_cell: gate axis must be 4H={4 * hidden}")
    if x.ndim != 2 or x.shape[1] != w_ih.shape[0]:
        raise DimensionError(f"lstm_cell: input axis 1 is {x.shape[-1]}, w_ih expects {w_ih.shape[0]}")
    for name, t in (("h_prev", h_prev), ("c_prev", c_prev)):
        if t.shape != (x.shape[0], hidden):
            raise DimensionError(f"lstm_cell: {name} hidden axis expects {(x.shape[0], hidden)}, got {t.shape}")

    gates = ops.add(ops.matmul(x, w_ih), ops.matmul(h_prev, w_hh))
    gates = ops.add(gates, ops.broadcast_to(b, gates.shape))
    i = ops.sigmoid(ops.take(gates, 1, 0, hidden))
    f = ops.sigmoid(ops.take(gates, 1, hidden, 2 * hidden))
    g = ops.tanh(ops.take(gates, 1, 2 * hidden, 3 * hidden))
    o = ops.sigmoid(ops.take(gates, 1, 3 * hidden, 4 * hidden))
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, c


def check_one_hot(labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise LabelError(f"labels must be [B, N], got shape {labels.shape}")
    ok = np.isin(labels, (0.0, 1.0)).all() and (labels.sum(axis=1) == 1.0).all()
    if not ok:
        raise LabelError("every label row must be one-hot")


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    # the shift is a constant; the derivative of logsumexp does not depend on it
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = ops.sub(logits, ops.broadcast_to(shift, logits.shape))
    lse = ops.log(ops.sum(ops.exp(z), axis=1, keepdims=True))
    return ops.sub(z, ops.broadcast_to(lse, z.shape))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[true class]``."""
    logits = as_tensor(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    check_one_hot(y)
    if y.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    picked = ops.sum(ops.mul(log_softmax(logits), Tensor(y)))
    return ops.mul(picked, -1.0 / logits.shape[0])


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target)
    return ops.mean(ops.square(ops.sub(pred, target)))


def accuracy(logits, labels) -> float:
    lg = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    return float((lg.argmax(axis=1) == y.argmax(axis=1)).mean())


def l2_distance(a, b) -> Tensor:
    """Euclidean distance between two flat tensors (zero subgradient at a == b)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"l2_distance: expected flat tensors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: length mismatch, {a.shape[0]} vs {b.shape[0]}")
    return ops.sqrt(ops.sum(ops.square(ops.sub(a, b))))


def pairwise_distances(x) -> Tensor:
    """All-pairs Euclidean distances between the rows of ``x`` [M, D] -> [M, M]."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"pairwise_distances: expected [M, D], got {x.shape}")
    m, d = x.shape
    rows = ops.broadcast_to(ops.reshape(x, (m, 1, d)), (m, m, d))
    cols = ops.broadcast_to(ops.reshape(x, (1, m, d)), (m, m, d))
    return ops.sqrt(ops.sum(ops.square(ops.sub(rows, cols)), axis=2))
