"""MAML with mutual-exclusiveness regularization (MER-MAML).

Parameters are split into a data-encoder segment and a task-solver segment.
Every parameter adapts in the inner loop; the regularizer compares adapted
solver segments of sampled task pairs against their adapted encoder segments:

    R = mean_k [ eta - d(solver_i, solver_j) / max(d(encoder_i, encoder_j), eps) ]

and the outer objective is ``sum_i L_query(phi_i) + lambda * R``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from merlearn import convnet
from merlearn.episodes import (
    CharacterStore,
    LabelMode,
    RegressionEpisode,
    RegressionTaskSpec,
    rng_stream,
    sample_batch,
    sample_episode,
    sample_regression_episode,
)
from merlearn.errors import ConfigError, DimensionError, NonFiniteError, NumericAbort
from merlearn.metrics import EPS_Z, MetricsRecord, mean_offdiag, pairwise_distance_matrix
from merlearn.tensorcore import (
    AdamState,
    ParamSet,
    Tensor,
    accuracy,
    adam_step,
    backward,
    l2_distance,
    mse,
    no_grad,
    ops,
    sgd_step,
    softmax_cross_entropy,
)


@dataclass(frozen=True)
class MamlArch:
    """``task`` is "classification" (conv encoder + linear solver) or
    "regression" (MLP encoder + linear solver on scalar inputs)."""

    n_way: int = 5
    task: str = "classification"
    image_size: int = 28
    conv_blocks: int = 4
    filters: int = 32
    hidden: int = 40
    hidden_layers: int = 2

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigError("model.task", f"unknown task {self.task!r}")

    @property
    def features(self) -> int:
        if self.task == "regression":
            return self.hidden
        return self.filters * convnet.conv_out_size(self.image_size, self.conv_blocks) ** 2


class MamlModel:
    def __init__(self, arch: MamlArch, params: ParamSet, inner_steps: int = 1, alpha: float = 0.04):
        if not params.names_in("encoder") or not params.names_in("solver"):
            raise ConfigError("model", "encoder and solver segments must both be non-empty")
        self.arch = arch
        self.params = params
        self.inner_steps = inner_steps
        self.alpha = alpha

    @classmethod
    def init(cls, arch: MamlArch, rng: np.random.Generator, inner_steps: int = 1, alpha: float = 0.04) -> "MamlModel":
        if arch.task == "classification":
            arrays = convnet.init_conv_stack(rng, "enc.", 1, arch.filters, arch.conv_blocks)
            arrays.update(convnet.init_linear(rng, "sol.", arch.features, arch.n_way))
        else:
            arrays, n_in = {}, 1
            for i in range(arch.hidden_layers):
                arrays.update(convnet.init_linear(rng, f"enc.fc{i}.", n_in, arch.hidden))
                n_in = arch.hidden
            arrays.update(convnet.init_linear(rng, "sol.", arch.hidden, 1))
        segments = {k: "encoder" if k.startswith("enc.") else "solver" for k in arrays}
        return cls(arch, ParamSet.leaves(arrays, segments), inner_steps, alpha)


@dataclass
class AdaptedParams:
    phi: ParamSet
    task_index: int
    steps: int


@dataclass(frozen=True)
class MerMamlConfig:
    lam: float = 0.0
    eta: float = 1.0
    k_pairs: int = 4
    eps_z: float = EPS_Z
    abs_form: bool = False      # |eta - ratio| instead of the signed eta - ratio
    simple: bool = False        # support-pixel distance as denominator, full phi as numerator

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("mer.lambda", "must be >= 0")
        if self.eta <= 0:
            raise ConfigError("mer.eta", "must be > 0")
        if self.lam > 0 and self.k_pairs < 1:
            raise ConfigError("mer.k_pairs", "must be >= 1 when lambda > 0")


@dataclass(frozen=True)
class MamlTrainConfig:
    k_shot: int = 1
    q_queries: int = 1
    label_mode: str = LabelMode.FIXED.value
    meta_batch: int = 10
    iterations: int = 1000
    alpha: float = 0.04
    beta: float = 0.0025
    inner_steps: int = 1
    eval_inner_steps: int = 1
    first_order: bool = False
    outer: str = "sgd"          # "sgd" follows the published update; "adam" is opt-in
    eval_every: int = 100
    eval_episodes: int = 100
    noise_sd: float = 0.0       # regression only
    seed: int = 0
    record_timing: bool = False


# -- forward pieces ---------------------------------------------------------


def features(params: ParamSet, arch: MamlArch, x) -> Tensor:
    if arch.task == "classification":
        return convnet.conv_stack(params, "enc.", x, arch.conv_blocks)
    out = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(arch.hidden_layers):
        out = ops.relu(convnet.dense(params, f"enc.fc{i}.", out))
    return out


def predict(params: ParamSet, arch: MamlArch, x) -> Tensor:
    return convnet.dense(params, "sol.", features(params, arch, x))


def task_loss(params: ParamSet, arch: MamlArch, x, y) -> Tensor:
    out = predict(params, arch, x)
    if arch.task == "classification":
        return softmax_cross_entropy(out, y)
    return mse(out, Tensor(y))


def score(params: ParamSet, arch: MamlArch, x, y) -> float:
    """Accuracy for classification, mean squared error for regression."""
    with no_grad():
        out = predict(params, arch, x)
    if arch.task == "classification":
        return accuracy(out, y)
    return float(np.mean((out.data - y) ** 2))


def inner_adapt(
    theta: ParamSet,
    support,
    alpha: float,
    steps: int,
    arch: MamlArch,
    first_order: bool = False,
    task_index: int = 0,
    loss_fn: Callable[[ParamSet, object, object], Tensor] | None = None,
) -> AdaptedParams:
    """Gradient descent on the support loss starting from ``theta``.

    The steps are taped, so anything computed from ``phi`` stays
    differentiable with respect to ``theta`` (second order unless
    ``first_order`` detaches the inner gradients). ``loss_fn(params, x, y)``
    replaces the architecture's task loss when given.
    """
    if len(support.support_x) == 0:
        raise DimensionError("inner_adapt: empty support set")
    if alpha < 0:
        raise ConfigError("optim.alpha", "must be >= 0")
    phi = theta
    if alpha == 0 or steps == 0:
        return AdaptedParams(phi, task_index, 0)
    try:
        for _ in range(steps):
            if loss_fn is None:
                loss = task_loss(phi, arch, support.support_x, support.support_y)
            else:
                loss = loss_fn(phi, support.support_x, support.support_y)
            g = backward(loss, phi, create_graph=not first_order)
            phi = sgd_step(phi, g, alpha)
    except NonFiniteError as exc:
        raise NumericAbort(f"task {task_index}: non-finite value during adaptation ({exc})") from exc
    return AdaptedParams(phi, task_index, steps)


def _flat(p) -> ParamSet:
    return p.phi if isinstance(p, AdaptedParams) else p


def segment_distance(phi_i, phi_j, segment: str | None) -> Tensor:
    """L2 distance between flattened segments (``None`` = all parameters)."""
    a, b = _flat(phi_i), _flat(phi_j)
    if not a.same_schema(b):
        raise DimensionError("segment_distance: parameter schemas differ")
    return l2_distance(a.flat_tensor(segment), b.flat_tensor(segment))


def support_pixels(episode) -> np.ndarray:
    """Support inputs flattened in label order (stable within a label)."""
    x, y = np.asarray(episode.support_x), np.asarray(episode.support_y)
    if y.ndim == 2 and y.shape[1] > 1:
        x = x[np.argsort(y.argmax(axis=1), kind="stable")]
    return x.reshape(-1)


def sample_pairs(n_tasks: int, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``k`` distinct unordered task pairs, without replacement."""
    pairs = [(i, j) for i in range(n_tasks) for j in range(i + 1, n_tasks)]
    if k > len(pairs):
        raise ConfigError("mer.k_pairs", f"{k} pairs requested but only {len(pairs)} exist")
    chosen = rng.choice(len(pairs), size=k, replace=False)
    return [pairs[c] for c in chosen]


def mer_regularizer(
    adapted: Sequence[AdaptedParams],
    config: MerMamlConfig,
    rng: np.random.Generator | None = None,
    pairs: Sequence[tuple[int, int]] | None = None,
    supports: Sequence | None = None,
) -> Tensor:
    if len(adapted) < 2:
        raise ConfigError("meta_batch", "the regularizer needs at least two adapted tasks")
    if pairs is None:
        pairs = sample_pairs(len(adapted), config.k_pairs, rng)
    if config.simple and supports is None:
        raise ConfigError("mer.simple", "support sets are required for the pixel-distance variant")
    terms = []
    for i, j in pairs:
        if config.simple:
            num = segment_distance(adapted[i], adapted[j], None)
            den = Tensor(max(float(np.linalg.norm(support_pixels(supports[i]) - support_pixels(supports[j]))), config.eps_z))
        else:
            num = segment_distance(adapted[i], adapted[j], "solver")
            den = ops.clamp_min(segment_distance(adapted[i], adapted[j], "encoder"), config.eps_z)
        term = ops.sub(config.eta, ops.div(num, den))
        terms.append(ops.abs_(term) if config.abs_form else term)
    return ops.mul(ops.sum(ops.stack(terms)), 1.0 / len(terms))


# -- outer loop -------------------------------------------------------------


@dataclass
class MetaObjective:
    total: Tensor
    task_loss: Tensor
    reg: Tensor
    pre_acc: float
    post_acc: float
    phi_enc_ratio: float
    mean_phi_distance: float


def _phi_stats(adapted: Sequence[AdaptedParams]) -> tuple[float, float]:
    sol = np.stack([a.phi.flat_tensor("solver").data for a in adapted])
    enc = np.stack([a.phi.flat_tensor("encoder").data for a in adapted])
    d_sol = mean_offdiag(pairwise_distance_matrix(sol))
    d_enc = mean_offdiag(pairwise_distance_matrix(enc))
    return d_sol / max(d_enc, EPS_Z), d_sol


def meta_objective(
    theta: ParamSet,
    batch: Sequence,
    arch: MamlArch,
    train_config: MamlTrainConfig,
    mer_config: MerMamlConfig | None,
    rng: np.random.Generator,
) -> MetaObjective:
    """Taped ``sum_i L_query(phi_i) + lambda * R`` plus per-batch diagnostics.

    With ``mer_config=None`` (plain MAML) the regularizer is never computed
    and ``rng`` is untouched. With ``lambda == 0`` it is computed off the
    tape for reporting only, so the gradient is exactly the plain one.
    """
    tc = train_config
    adapted, losses, pre, post = [], [], [], []
    for i, ep in enumerate(batch):
        pre.append(score(theta, arch, ep.query_x, ep.query_y))
        a = inner_adapt(theta, ep, tc.alpha, tc.inner_steps, arch, tc.first_order, task_index=i)
        try:
            losses.append(task_loss(a.phi, arch, ep.query_x, ep.query_y))
        except NonFiniteError as exc:
            raise NumericAbort(f"task {i}: non-finite query loss ({exc})") from exc
        post.append(score(a.phi, arch, ep.query_x, ep.query_y))
        adapted.append(a)
    l_ts = ops.sum(ops.stack(losses))

    reg, total = Tensor(0.0), l_ts
    if mer_config is not None and len(batch) >= 2 and mer_config.k_pairs >= 1:
        if mer_config.lam > 0:
            reg = mer_regularizer(adapted, mer_config, rng, supports=batch)
            total = ops.add(l_ts, ops.mul(reg, mer_config.lam))
        else:
            with no_grad():
                reg = mer_regularizer(adapted, mer_config, rng, supports=batch)
    ratio, dist = _phi_stats(adapted) if len(batch) >= 2 else (0.0, 0.0)
    return MetaObjective(total, l_ts, reg, float(np.mean(pre)), float(np.mean(post)), ratio, dist)


def meta_step(
    theta: ParamSet,
    episode_batch: Sequence,
    arch: MamlArch,
    train_config: MamlTrainConfig,
    mer_config: MerMamlConfig | None,
    rng: np.random.Generator,
    iteration: int = 0,
) -> tuple[ParamSet, MetricsRecord]:
    """One outer SGD step with step size ``beta`` on the meta-objective."""
    obj = meta_objective(theta, episode_batch, arch, train_config, mer_config, rng)
    record = _record(iteration, obj, train_config.seed)
    try:
        grads = backward(obj.total, theta)
    except NonFiniteError as exc:
        raise NumericAbort(f"iteration {iteration}: non-finite meta-gradient ({exc})", record) from exc
    new = sgd_step(theta.detach(), grads, train_config.beta)
    return new.as_leaves(), record


def _record(iteration: int, obj: MetaObjective, seed: int) -> MetricsRecord:
    return MetricsRecord(
        iteration=iteration,
        task_loss=obj.task_loss.item(),
        reg_loss=obj.reg.item(),
        total_loss=obj.total.item(),
        train_acc=obj.post_acc,
        train_pre_acc=obj.pre_acc,
        phi_enc_ratio=obj.phi_enc_ratio,
        mean_phi_distance=obj.mean_phi_distance,
        seed=seed,
    )


# -- task sources -----------------------------------------------------------


class ClassificationTasks:
    def __init__(self, store: CharacterStore, n_way: int, k_shot: int, q_queries: int, mode: str):
        self.store, self.n_way, self.k_shot, self.q_queries, self.mode = store, n_way, k_shot, q_queries, mode

    def batch(self, split: str, size: int, rng) -> list:
        return sample_batch(self.store, split, self.n_way, self.k_shot, self.q_queries, self.mode, rng, size)

    def episode(self, split: str, rng):
        return sample_episode(self.store, split, self.n_way, self.k_shot, self.q_queries, self.mode, rng)


class RegressionTasks:
    """Synthetic sinusoid tasks; task ids are split train/val/test by ``id % 5``."""

    def __init__(self, spec: RegressionTaskSpec, k_shot: int, q_queries: int, noise_sd: float = 0.0):
        self.spec, self.k_shot, self.q_queries, self.noise_sd = spec, k_shot, q_queries, noise_sd

    def task_ids(self, split: str) -> list[int]:
        ids = range(self.spec.n_tasks)
        if split == "test":
            return [t for t in ids if t % 5 == 2]
        if split == "val":
            return [t for t in ids if t % 5 == 4]
        return [t for t in ids if t % 5 not in (2, 4)]

    def episode(self, split: str, rng) -> RegressionEpisode:
        ids = self.task_ids(split)
        t = ids[int(rng.integers(len(ids)))]
        return sample_regression_episode(self.spec, t, self.k_shot, self.q_queries, self.noise_sd, rng)

    def batch(self, split: str, size: int, rng) -> list:
        ids = self.task_ids(split)
        chosen = rng.choice(len(ids), size=size, replace=size > len(ids))
        return [sample_regression_episode(self.spec, ids[c], self.k_shot, self.q_queries, self.noise_sd, rng)
                for c in chosen]


def evaluate_maml(
    theta: ParamSet,
    tasks,
    split: str,
    n_episodes: int,
    eval_inner_steps: int,
    rng: np.random.Generator,
    arch: MamlArch,
    alpha: float,
) -> dict:
    """Query score before (``pre``) and after (``post``) support adaptation."""
    leaves = theta.as_leaves()
    pre, post = [], []
    for _ in range(n_episodes):
        ep = tasks.episode(split, rng)
        pre.append(score(leaves, arch, ep.query_x, ep.query_y))
        if eval_inner_steps == 0:
            post.append(pre[-1])
            continue
        a = inner_adapt(leaves, ep, alpha, eval_inner_steps, arch, first_order=True)
        post.append(score(a.phi, arch, ep.query_x, ep.query_y))
    return {
        "pre_acc": float(np.mean(pre)),
        "post_acc": float(np.mean(post)),
        "std": float(np.std(post)),
        "pre_std": float(np.std(pre)),
    }


def train_maml(
    model: MamlModel,
    tasks,
    train_config: MamlTrainConfig,
    mer_config: MerMamlConfig | None,
) -> Iterator[MetricsRecord]:
    """Iterate meta-steps, updating ``model.params``; evaluates on val periodically."""
    tc = train_config
    episode_rng = rng_stream(tc.seed, "maml-train-episodes")
    pair_rng = rng_stream(tc.seed, "maml-pairs")
    adam: AdamState | None = None
    val = {"pre_acc": 0.0, "post_acc": 0.0}
    for it in range(1, tc.iterations + 1):
        t0 = time.perf_counter()
        batch = tasks.batch("train", tc.meta_batch, episode_rng)
        if tc.outer == "sgd":
            model.params, record = meta_step(model.params, batch, model.arch, tc, mer_config, pair_rng, it)
        else:
            obj = meta_objective(model.params, batch, model.arch, tc, mer_config, pair_rng)
            record = _record(it, obj, tc.seed)
            try:
                grads = backward(obj.total, model.params)
            except NonFiniteError as exc:
                raise NumericAbort(f"iteration {it}: non-finite meta-gradient ({exc})", record) from exc
            adam, model.params = adam_step(adam, model.params, grads, tc.beta)
        if tc.eval_every > 0 and (it % tc.eval_every == 0 or it == tc.iterations):
            val = evaluate_maml(model.params, tasks, "val", tc.eval_episodes, tc.eval_inner_steps,
                                rng_stream(tc.seed, "maml-val", it), model.arch, tc.alpha)
        record.val_pre_acc = val["pre_acc"]
        record.val_post_acc = val["post_acc"]
        record.wall_ms = (time.perf_counter() - t0) * 1000.0 if tc.record_timing else 0.0
        if not record.is_finite():
            raise NumericAbort(f"iteration {it}: non-finite metrics", record)
        yield record
