"""Named parameter collections, gradient helpers and optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from merlearn.errors import DimensionError
from merlearn.tensorcore import ops
from merlearn.tensorcore.tensor import Tensor, grad

SEGMENTS = ("encoder", "solver", "other")


class ParamSet(Mapping[str, Tensor]):
    """Ordered, immutable name -> Tensor map with a segment tag per entry."""

    __slots__ = ("_tensors", "_segments")

    def __init__(self, tensors: Mapping[str, Tensor], segments: Mapping[str, str] | None = None):
        self._tensors = dict(tensors)
        segments = dict(segments or {})
        for name in segments:
            if name not in self._tensors:
                raise KeyError(f"segment tag for unknown parameter {name!r}")
        self._segments = {name: segments.get(name, "other") for name in self._tensors}
        for name, seg in self._segments.items():
            if seg not in SEGMENTS:
                raise ValueError(f"parameter {name!r}: unknown segment {seg!r}")

    @classmethod
    def leaves(cls, arrays: Mapping[str, np.ndarray], segments: Mapping[str, str] | None = None) -> "ParamSet":
        """Fresh tracked leaf tensors from raw arrays."""
        return cls({k: Tensor(np.array(v, dtype=np.float64), tracked=True) for k, v in arrays.items()}, segments)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{list(v.shape)}:{self._segments[k]}" for k, v in self._tensors.items())
        return f"ParamSet({body})"

    @property
    def segments(self) -> dict[str, str]:
        return dict(self._segments)

    def segment_of(self, name: str) -> str:
        return self._segments[name]

    def names_in(self, segment: str) -> list[str]:
        return [k for k, s in self._segments.items() if s == segment]

    def select(self, segment: str) -> "ParamSet":
        names = self.names_in(segment)
        return ParamSet({k: self._tensors[k] for k in names}, {k: segment for k in names})

    def same_schema(self, other: "ParamSet") -> bool:
        return (
            list(self) == list(other)
            and self._segments == other._segments
            and all(self[k].shape == other[k].shape for k in self)
        )

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet({k: fn(k, v) for k, v in self._tensors.items()}, self._segments)

    def detach(self) -> "ParamSet":
        return self.map(lambda _, t: t.detach())

    def as_leaves(self) -> "ParamSet":
        return ParamSet.leaves({k: v.data for k, v in self._tensors.items()}, self._segments)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    def num_values(self) -> int:
        return int(np.sum([v.size for v in self._tensors.values()]))

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.data.reshape(-1) for v in self._tensors.values()])

    def unflatten(self, vec: np.ndarray, tracked: bool = True) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_values(),):
            raise DimensionError(f"unflatten: expected {self.num_values()} values, got {vec.shape}")
        out, offset = {}, 0
        for k, v in self._tensors.items():
            out[k] = Tensor(vec[offset:offset + v.size].reshape(v.shape).copy(), tracked=tracked)
            offset += v.size
        return ParamSet(out, self._segments)

    def flat_tensor(self, segment: str | None = None) -> Tensor:
        """Differentiable concatenation of all (or one segment's) entries."""
        names = list(self) if segment is None else self.names_in(segment)
        if not names:
            raise DimensionError(f"no parameters in segment {segment!r}")
        return ops.concat([ops.flatten(self._tensors[k]) for k in names])


def _check_schema(params: ParamSet, grads: ParamSet, name: str) -> None:
    for k in params:
        if k not in grads:
            raise DimensionError(f"{name}: missing gradient for {k!r}")
        if params[k].shape != grads[k].shape:
            raise DimensionError(f"{name}: {k!r} shape {params[k].shape} vs gradient {grads[k].shape}")


def backward(loss: Tensor, wrt: ParamSet, create_graph: bool = False) -> ParamSet:
    """Gradient of a scalar ``loss`` for every entry of ``wrt``."""
    names = list(wrt)
    gs = grad(loss, [wrt[k] for k in names], create_graph=create_graph)
    return ParamSet(dict(zip(names, gs)), wrt.segments)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """``params - lr * grads``; stays on the tape when recording."""
    _check_schema(params, grads, "sgd_step")
    if lr == 0:
        return params
    return params.map(lambda k, p: ops.sub(p, ops.mul(grads[k], lr)))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState | None,
    params: ParamSet,
    grads: ParamSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, ParamSet]:
    """One bias-corrected Adam update. Never taped; returns fresh leaves."""
    _check_schema(params, grads, "adam_step")
    state = state or AdamState()
    for k in params:
        if k in state.m and state.m[k].shape != params[k].shape:
            raise DimensionError(f"adam_step: state for {k!r} has shape {state.m[k].shape}")
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k in params:
        g = grads[k].data
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_m[k], new_v[k] = m, v
        new_p[k] = params[k].data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(t, new_m, new_v), ParamSet.leaves(new_p, params.segments)


def finite_difference_check(f: Callable[[ParamSet], Tensor], params: ParamSet, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|)."""
    leaves = params.as_leaves()
    analytic = backward(f(leaves), leaves).flatten()
    base = leaves.flatten()
    numeric = np.empty_like(base)
    # perturbed points stay tracked: f may itself differentiate (inner loops)
    for i in range(base.size):
        x = base.copy()
        x[i] += step
        up = f(leaves.unflatten(x)).item()
        x[i] -= 2 * step
        down = f(leaves.unflatten(x)).item()
        numeric[i] = (up - down) / (2 * step)
    if base.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))
