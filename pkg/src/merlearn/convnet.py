"""Conv encoder shared by both learners: blocks of conv(3x3, stride 2, pad 1) + ReLU."""

from __future__ import annotations

import math

import numpy as np

from merlearn.tensorcore import Tensor, conv2d, linear, ops


def conv_out_size(size: int, blocks: int, k: int = 3, stride: int = 2, pad: int = 1) -> int:
    for _ in range(blocks):
        size = (size + 2 * pad - k) // stride + 1
    return size


def init_conv_stack(rng: np.random.Generator, prefix: str, in_channels: int, filters: int, blocks: int) -> dict:
    arrays = {}
    c = in_channels
    for i in range(blocks):
        fan_in = c * 9
        arrays[f"{prefix}conv{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(filters, c, 3, 3))
        arrays[f"{prefix}conv{i}.b"] = np.zeros(filters)
        c = filters
    return arrays


def init_linear(rng: np.random.Generator, prefix: str, n_in: int, n_out: int) -> dict:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return {f"{prefix}w": rng.uniform(-bound, bound, size=(n_in, n_out)), f"{prefix}b": np.zeros(n_out)}


def conv_stack(params, prefix: str, x, blocks: int) -> Tensor:
    """Run the conv blocks and flatten to [M, features]."""
    out = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(blocks):
        out = ops.relu(conv2d(out, params[f"{prefix}conv{i}.w"], stride=2, padding=1, bias=params[f"{prefix}conv{i}.b"]))
    return ops.reshape(out, (out.shape[0], -1))


def dense(params, prefix: str, x) -> Tensor:
    return linear(x, params[f"{prefix}w"], params[f"{prefix}b"])
