"""Finite-difference verification of every primitive and of both full losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from merlearn.episodes import SplitSpec, rng_stream, sample_batch, synthetic_store
from merlearn.tensorcore import (
    ParamSet,
    Tensor,
    conv2d,
    finite_difference_check,
    l2_distance,
    linear,
    lstm_cell,
    mse,
    ops,
    pairwise_distances,
    softmax_cross_entropy,
)
from merlearn.tensorcore.nn import log_softmax

PRIMITIVE_TOL = 1e-4
MANN_TOL = 1e-4
MAML_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _weigh(t: Tensor, rng) -> Tensor:
    # random projection to a scalar so no output coordinate is favoured
    return ops.sum(ops.mul(t, Tensor(rng.normal(size=t.shape))))


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[ParamSet], Tensor], dict]]:
    """One (name, scalar function, inputs) case per differentiable primitive."""
    n = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    away = lambda *s: rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.3, 2.0, size=s)  # kinks stay clear
    idx = rng.integers(0, 6, size=9)
    labels = np.eye(4)[rng.integers(0, 4, size=3)]

    def case(name, fn, **arrays):
        def f(p, fn=fn, name=name):
            out = fn(p)
            return _weigh(out, rng_stream(0, "weigh", name)) if out.size > 1 else ops.reshape(out, ())
        return (name, f, arrays)

    return [
        case("broadcast_to", lambda p: ops.broadcast_to(p["x"], (3, 4)), x=n(1, 4)),
        case("sum_to", lambda p: ops.sum_to(p["x"], (1, 4)), x=n(3, 4)),
        case("reshape", lambda p: ops.reshape(p["x"], (4, 3)), x=n(3, 4)),
        case("transpose", lambda p: ops.transpose(p["x"], (1, 0, 2)), x=n(2, 3, 2)),
        case("take", lambda p: ops.take(p["x"], 1, 1, 3), x=n(2, 4)),
        case("place", lambda p: ops.place(p["x"], 1, 1, 5), x=n(2, 2)),
        case("concat", lambda p: ops.concat([p["a"], p["b"]], axis=1), a=n(2, 2), b=n(2, 3)),
        case("stack", lambda p: ops.stack([p["a"], p["b"]]), a=n(3), b=n(3)),
        case("gather_flat", lambda p: ops.gather_flat(p["x"], idx.reshape(3, 3)), x=n(2, 3)),
        case("scatter_flat", lambda p: ops.scatter_flat(p["x"], idx, (2, 3)), x=n(9)),
        case("pad2d", lambda p: ops.pad2d(p["x"], 1), x=n(1, 1, 3, 3)),
        case("crop2d", lambda p: ops.crop2d(p["x"], 1), x=n(1, 1, 4, 4)),
        case("add", lambda p: ops.add(p["a"], p["b"]), a=n(3), b=n(3)),
        case("sub", lambda p: ops.sub(p["a"], p["b"]), a=n(3), b=n(3)),
        case("neg", lambda p: ops.neg(p["a"]), a=n(3)),
        case("mul", lambda p: ops.mul(p["a"], p["b"]), a=n(3), b=n(3)),
        case("div", lambda p: ops.div(p["a"], p["b"]), a=n(3), b=away(3)),
        case("square", lambda p: ops.square(p["a"]), a=n(3)),
        case("exp", lambda p: ops.exp(p["a"]), a=n(3)),
        case("log", lambda p: ops.log(p["a"]), a=pos(3)),
        case("tanh", lambda p: ops.tanh(p["a"]), a=n(3)),
        case("sigmoid", lambda p: ops.sigmoid(p["a"]), a=n(3)),
        case("relu", lambda p: ops.relu(p["a"]), a=away(4)),
        case("abs", lambda p: ops.abs_(p["a"]), a=away(4)),
        case("clamp_min", lambda p: ops.clamp_min(p["a"], 0.0), a=away(4)),
        case("safe_reciprocal", lambda p: ops.safe_reciprocal(p["a"]), a=away(3)),
        case("sqrt", lambda p: ops.sqrt(p["a"]), a=pos(3)),
        case("sum", lambda p: ops.sum(p["a"], axis=0), a=n(3, 2)),
        case("mean", lambda p: ops.mean(p["a"], axis=1), a=n(3, 2)),
        case("matmul", lambda p: ops.matmul(p["a"], p["b"]), a=n(2, 3), b=n(3, 2)),
        case("linear", lambda p: linear(p["x"], p["w"], p["b"]), x=n(2, 3), w=n(3, 2), b=n(2)),
        case("conv2d", lambda p: conv2d(p["x"], p["w"], stride=2, padding=1, bias=p["b"]),
             x=n(2, 2, 5, 5), w=n(3, 2, 3, 3), b=n(3)),
        case("lstm_cell", lambda p: ops.concat(list(lstm_cell(p["x"], p["h"], p["c"], p)), axis=1),
             x=n(2, 2), h=n(2, 3), c=n(2, 3), w_ih=n(2, 12), w_hh=n(3, 12), bias=n(12)),
        case("log_softmax", lambda p: log_softmax(p["z"]), z=n(3, 4)),
        case("softmax_cross_entropy", lambda p: softmax_cross_entropy(p["z"], labels), z=n(3, 4)),
        case("mse", lambda p: mse(p["a"], p["b"]), a=n(4, 1), b=n(4, 1)),
        case("l2_distance", lambda p: l2_distance(p["a"], p["b"]), a=n(5), b=n(5)),
        case("pairwise_distances", lambda p: pairwise_distances(p["x"]), x=n(4, 3)),
    ]


def check_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, finite_difference_check(f, ParamSet.leaves(arrays)), PRIMITIVE_TOL)
            for name, f, arrays in primitive_cases(rng)]


def _tiny_store(seed: int):
    return synthetic_store(6, 4, SplitSpec(4, 1, 1), seed)


def _off_kinks(params: ParamSet, seed: int) -> ParamSet:
    """Nonzero biases: blank pixels would otherwise sit exactly on a ReLU kink."""
    rng = rng_stream(seed, "gradcheck-bias")
    arrays = {k: v + rng.uniform(0.05, 0.2, size=v.shape) if k.endswith(".b") else v
              for k, v in params.arrays().items()}
    return ParamSet.leaves(arrays, params.segments)


def check_mann_loss(seed: int = 0) -> CheckResult:
    """Full MANN objective (task loss + M3 term) on a 2-way, 2-task, 1-block model."""
    from merlearn.mann import MannArch, MannModel, MerMannConfig, mann_forward, mer_mann_loss

    store = _tiny_store(seed)
    arch = MannArch(2, image_size=28, conv_blocks=1, filters=1, latent=3, hidden=3)
    model = MannModel.init(arch, rng_stream(seed, "gradcheck-mann"))
    episodes = sample_batch(store, "train", 2, 1, 1, "shuffled", rng_stream(seed, "gradcheck-episodes"), 2)
    config = MerMannConfig("m3", lam=1.0, eta=2.0)

    def loss(params):
        trace = mann_forward(MannModel(arch, params), episodes)
        return mer_mann_loss(trace, episodes, config).total

    return CheckResult("mann_loss", finite_difference_check(loss, _off_kinks(model.params, seed)), MANN_TOL)


def check_maml_meta_loss(seed: int = 0) -> CheckResult:
    """Second-order MER-MAML meta-objective on a 2-way, batch-2, K=1 model."""
    from merlearn.maml import MamlArch, MamlModel, MamlTrainConfig, MerMamlConfig, meta_objective

    store = _tiny_store(seed)
    arch = MamlArch(2, image_size=28, conv_blocks=2, filters=1)
    model = MamlModel.init(arch, rng_stream(seed, "gradcheck-maml"))
    episodes = sample_batch(store, "train", 2, 1, 1, "shuffled", rng_stream(seed, "gradcheck-episodes"), 2)
    tc = MamlTrainConfig(meta_batch=2, alpha=0.5, inner_steps=1)
    mer = MerMamlConfig(lam=0.5, eta=1.0, k_pairs=1)

    def loss(params):
        # fixed pair stream so every evaluation picks the same pair
        return meta_objective(params, episodes, arch, tc, mer, rng_stream(seed, "gradcheck-pairs")).total

    return CheckResult("mer_maml_meta_loss", finite_difference_check(loss, _off_kinks(model.params, seed)), MAML_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_primitives(seed) + [check_mann_loss(seed), check_maml_meta_loss(seed)]
