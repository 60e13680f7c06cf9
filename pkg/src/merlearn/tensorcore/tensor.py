"""Dense float64 tensors with a reverse-mode tape.

Every primitive records its inputs and a vector-Jacobian product written in
terms of other primitives, so a backward pass run while recording is itself
differentiable. That is what makes second-order meta-gradients possible.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from merlearn.errors import DimensionError, NonFiniteError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(enabled: bool):
    """Switch tape recording on or off for the current thread."""
    prev = is_recording()
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    return recording(False)


VJP = Callable[["Tensor"], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "tracked", "parents", "vjp", "op", "__weakref__")

    def __init__(self, data, tracked: bool = False, parents: tuple = (), vjp: VJP | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        # a single reduction is cheaper than isfinite(); NaN/Inf propagate into it
        with np.errstate(all="ignore"):
            total = np.add.reduce(arr, axis=None)
        if not np.isfinite(total):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.tracked = tracked
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from merlearn.tensorcore import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from merlearn.tensorcore import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from merlearn.tensorcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from merlearn.tensorcore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from merlearn.tensorcore import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from merlearn.tensorcore import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from merlearn.tensorcore import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from merlearn.tensorcore import ops
        return ops.div(other, self)

    def __neg__(self):
        from merlearn.tensorcore import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from merlearn.tensorcore import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP, op: str) -> Tensor:
    """Wrap a primitive's output, recording it on the tape when needed."""
    if is_recording() and any(t.tracked for t in inputs):
        return Tensor(data, tracked=True, parents=tuple(inputs), vjp=vjp, op=op)
    return Tensor(data, op=op)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    Inputs that the output does not depend on receive exact zeros. With
    ``create_graph=True`` the returned gradients are themselves taped and
    can be differentiated again.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise DimensionError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.tracked:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]

    order = _toposort(output)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    wanted = {id(t) for t in inputs}
    with recording(create_graph):
        # order is post-order from the root: consumers come after producers
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            if id(node) not in wanted:
                # intermediate gradients are not needed once propagated
                del grads[id(node)]
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.tracked:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph and g.tracked:
            g = g.detach()
        out.append(g)
    return out
