"""Black-box meta-learner: conv encoder feeding an LSTM, with MER penalties.

Each task's support images are encoded, concatenated with their one-hot
labels and run through the LSTM. The final hidden state ``h`` is the task
summary; every query is then encoded, paired with a zero label vector and
stepped once from that state before the linear head. ``z`` is the mean of the
support encodings and carries no label information.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from merlearn import convnet
from merlearn.episodes import CharacterStore, Episode, LabelMode, rng_stream, sample_batch
from merlearn.errors import ConfigError, DimensionError, NonFiniteError, NumericAbort
from merlearn.metrics import EPS_Z, MetricsRecord, hz_ratio
from merlearn.tensorcore import (
    AdamState,
    ParamSet,
    Tensor,
    accuracy,
    adam_step,
    backward,
    lstm_cell,
    no_grad,
    ops,
    pairwise_distances,
    softmax_cross_entropy,
)

METHODS = ("none", "m1", "m2", "m3")


@dataclass(frozen=True)
class MannArch:
    n_way: int
    image_size: int = 28
    conv_blocks: int = 4
    filters: int = 32
    latent: int = 64
    hidden: int = 128
    query_label: str = "zero"      # label slot fed with each query: "zero" or "uniform" (1/N)

    def __post_init__(self):
        if self.query_label not in ("zero", "uniform"):
            raise ConfigError("model.query_label", f"expected zero or uniform, got {self.query_label!r}")

    @property
    def conv_features(self) -> int:
        return self.filters * convnet.conv_out_size(self.image_size, self.conv_blocks) ** 2


class MannModel:
    """Architecture plus its current parameters; training swaps ``params``."""

    def __init__(self, arch: MannArch, params: ParamSet):
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: MannArch, rng: np.random.Generator) -> "MannModel":
        arrays = convnet.init_conv_stack(rng, "enc.", 1, arch.filters, arch.conv_blocks)
        arrays.update(convnet.init_linear(rng, "enc.proj.", arch.conv_features, arch.latent))
        n_in, H = arch.latent + arch.n_way, arch.hidden
        bound = 1.0 / math.sqrt(H)
        arrays["lstm.w_ih"] = rng.uniform(-bound, bound, size=(n_in, 4 * H))
        arrays["lstm.w_hh"] = rng.uniform(-bound, bound, size=(H, 4 * H))
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0  # forget gate starts open
        arrays["lstm.bias"] = bias
        arrays.update(convnet.init_linear(rng, "head.", H, arch.n_way))
        segments = {k: "encoder" if k.startswith("enc.") else "solver" if k.startswith("lstm.") else "other" for k in arrays}
        return cls(arch, ParamSet.leaves(arrays, segments))

    @property
    def encoder(self) -> ParamSet:
        return self.params.select("encoder")

    @property
    def memory(self) -> ParamSet:
        return self.params.select("solver")

    @property
    def head(self) -> ParamSet:
        return self.params.select("other")


@dataclass
class MannTrace:
    z: Tensor               # [B, latent] mean support encoding per task
    h: Tensor               # [B, hidden] LSTM state after the support sequence
    logits: Tensor          # [B * N * Q, N]
    labels: np.ndarray      # matching one-hot query labels
    n_tasks: int


@dataclass(frozen=True)
class MerMannConfig:
    method: str = "none"
    lam: float = 1.0
    eta: float = 1.0
    eps_z: float = EPS_Z
    cap_factor: float = 10.0   # |reg| cap for m1/m2 as a multiple of |task_loss|; <= 0 disables
    reduction: str = "sum"     # "sum" over ordered pairs, or "mean" (sum / (B(B-1)))

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("mer.method", f"must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0:
            raise ConfigError("mer.lambda", "must be >= 0")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("mer.reduction", f"must be sum or mean, got {self.reduction!r}")
        if self.method == "m3" and self.eta <= 0:
            raise ConfigError("mer.eta", "must be > 0 for method m3")


@dataclass
class LossBreakdown:
    task_loss: Tensor
    reg_loss: Tensor
    total: Tensor


def encode(model: MannModel, x) -> Tensor:
    feats = convnet.conv_stack(model.params, "enc.", x, model.arch.conv_blocks)
    return convnet.dense(model.params, "enc.proj.", feats)


def _check_batch(episodes: Sequence[Episode], n_way: int) -> tuple[int, int, int]:
    if not episodes:
        raise DimensionError("empty episode batch")
    shape = (episodes[0].n_way, episodes[0].k_shot, episodes[0].q_queries)
    for e in episodes:
        if (e.n_way, e.k_shot, e.q_queries) != shape:
            raise DimensionError(f"batch mixes episode shapes {shape} and {(e.n_way, e.k_shot, e.q_queries)}")
    if shape[0] != n_way:
        raise DimensionError(f"episodes are {shape[0]}-way but the model is {n_way}-way")
    return shape


def mann_forward(model: MannModel, episodes: Sequence[Episode]) -> MannTrace:
    N, K, Q = _check_batch(episodes, model.arch.n_way)
    B, S, D = len(episodes), N * K, model.arch.latent
    lstm = {"w_ih": model.params["lstm.w_ih"], "w_hh": model.params["lstm.w_hh"], "bias": model.params["lstm.bias"]}

    images = np.concatenate([e.support_x for e in episodes] + [e.query_x for e in episodes])
    latents = encode(model, images)
    support = ops.reshape(ops.take(latents, 0, 0, B * S), (B, S * D))
    queries = ops.take(latents, 0, B * S, latents.shape[0])
    z = ops.mul(ops.sum(ops.reshape(support, (B, S, D)), axis=1), 1.0 / S)

    labels = np.stack([e.support_y for e in episodes])            # [B, S, N]
    h = Tensor(np.zeros((B, model.arch.hidden)))
    c = Tensor(np.zeros((B, model.arch.hidden)))
    for t in range(S):
        step = ops.concat([ops.take(support, 1, t * D, (t + 1) * D), Tensor(labels[:, t, :])], axis=1)
        h, c = lstm_cell(step, h, c, lstm)

    H = model.arch.hidden
    hq = ops.reshape(ops.broadcast_to(ops.reshape(h, (B, 1, H)), (B, N * Q, H)), (B * N * Q, H))
    cq = ops.reshape(ops.broadcast_to(ops.reshape(c, (B, 1, H)), (B, N * Q, H)), (B * N * Q, H))
    fill = 0.0 if model.arch.query_label == "zero" else 1.0 / N
    q_in = ops.concat([queries, Tensor(np.full((B * N * Q, N), fill))], axis=1)
    out, _ = lstm_cell(q_in, hq, cq, lstm)
    logits = convnet.dense(model.params, "head.", out)
    query_labels = np.concatenate([e.query_y for e in episodes])
    return MannTrace(z=z, h=h, logits=logits, labels=query_labels, n_tasks=B)


def task_distance_matrix(vectors: Sequence) -> Tensor:
    """Symmetric matrix of pairwise L2 distances with a zero diagonal."""
    vs = [v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64)) for v in vectors]
    if len(vs) < 2:
        raise DimensionError("task_distance_matrix needs at least two vectors")
    n = vs[0].shape
    for v in vs:
        if v.ndim != 1 or v.shape != n:
            raise DimensionError(f"task vectors must be flat with equal length, got {n} and {v.shape}")
    return pairwise_distances(ops.stack(vs))


def _offdiag_mask(m: int) -> Tensor:
    return Tensor(1.0 - np.eye(m))


def mer_mann_loss(trace: MannTrace, episodes: Sequence[Episode], config: MerMannConfig) -> LossBreakdown:
    if len(episodes) != trace.n_tasks:
        raise DimensionError(f"trace has {trace.n_tasks} tasks, got {len(episodes)} episodes")
    task_loss = softmax_cross_entropy(trace.logits, trace.labels)
    if config.method == "none":
        return LossBreakdown(task_loss, Tensor(0.0), task_loss)
    B = trace.n_tasks
    if B < 2:
        raise ConfigError("meta_batch", f"method {config.method} needs at least 2 tasks per batch")

    mask = _offdiag_mask(B)
    dh = pairwise_distances(trace.h)
    if config.method == "m1":
        reg = ops.neg(ops.sum(ops.mul(dh, mask)))
    else:
        dz = ops.clamp_min(pairwise_distances(trace.z), config.eps_z)
        ratio = ops.div(dh, dz)
        if config.method == "m2":
            reg = ops.neg(ops.sum(ops.mul(ratio, mask)))
        else:
            reg = ops.sum(ops.mul(ops.abs_(ops.sub(config.eta, ratio)), mask))
    if config.reduction == "mean":
        reg = ops.mul(reg, 1.0 / (B * (B - 1)))

    if config.method in ("m1", "m2") and config.cap_factor > 0:
        cap = config.cap_factor * abs(task_loss.item())
        if abs(reg.item()) > cap:
            reg = ops.mul(reg, cap / abs(reg.item()))

    if config.lam == 0:
        return LossBreakdown(task_loss, reg, task_loss)
    return LossBreakdown(task_loss, reg, ops.add(task_loss, ops.mul(reg, config.lam)))


# -- training and evaluation ------------------------------------------------


@dataclass(frozen=True)
class MannTrainConfig:
    k_shot: int = 1
    q_queries: int = 1
    label_mode: str = LabelMode.FIXED.value
    meta_batch: int = 32
    iterations: int = 1000
    adam_lr: float = 0.001
    eval_every: int = 100
    eval_episodes: int = 100
    seed: int = 0
    record_timing: bool = False


def evaluate_mann(
    model: MannModel,
    store: CharacterStore,
    split: str,
    n_episodes: int,
    rng: np.random.Generator,
    k_shot: int = 1,
    q_queries: int = 1,
    mode: str = LabelMode.SHUFFLED.value,
    chunk: int = 32,
) -> tuple[float, float]:
    """Mean and std over episodes of query accuracy."""
    accs = []
    with no_grad():
        done = 0
        while done < n_episodes:
            size = min(chunk, n_episodes - done)
            batch = sample_batch(store, split, model.arch.n_way, k_shot, q_queries, mode, rng, size)
            trace = mann_forward(model, batch)
            per = trace.labels.shape[0] // size
            hits = trace.logits.data.argmax(axis=1) == trace.labels.argmax(axis=1)
            accs.extend(hits.reshape(size, per).mean(axis=1))
            done += size
    return float(np.mean(accs)), float(np.std(accs))


def train_mann(
    model: MannModel,
    store: CharacterStore,
    train_config: MannTrainConfig,
    mer_config: MerMannConfig,
) -> Iterator[MetricsRecord]:
    """Adam on the regularized objective; updates ``model.params`` in place.

    Validation accuracy is re-measured every ``eval_every`` iterations on the
    val split, in the training label mode, and carried forward in between.
    """
    tc = train_config
    episodes_rng = rng_stream(tc.seed, "mann-train-episodes")
    state: AdamState | None = None
    val_acc = 0.0
    for it in range(1, tc.iterations + 1):
        t0 = time.perf_counter()
        batch = sample_batch(store, "train", model.arch.n_way, tc.k_shot, tc.q_queries, tc.label_mode,
                             episodes_rng, tc.meta_batch)
        try:
            trace = mann_forward(model, batch)
            losses = mer_mann_loss(trace, batch, mer_config)
            grads = backward(losses.total, model.params)
        except NonFiniteError as exc:
            raise NumericAbort(f"iteration {it}: {exc}", MetricsRecord(it, math.nan, math.nan, math.nan, math.nan, seed=tc.seed)) from exc
        train_acc = accuracy(trace.logits, trace.labels)
        ratio = hz_ratio(trace) if trace.n_tasks >= 2 else 0.0
        state, model.params = adam_step(state, model.params, grads, tc.adam_lr)

        if tc.eval_every > 0 and (it % tc.eval_every == 0 or it == tc.iterations):
            val_acc, _ = evaluate_mann(model, store, "val", tc.eval_episodes, rng_stream(tc.seed, "mann-val", it),
                                       tc.k_shot, tc.q_queries, tc.label_mode)
        record = MetricsRecord(
            iteration=it,
            task_loss=losses.task_loss.item(),
            reg_loss=losses.reg_loss.item(),
            total_loss=losses.total.item(),
            train_acc=train_acc,
            train_pre_acc=train_acc,
            val_pre_acc=val_acc,
            val_post_acc=val_acc,
            hz_ratio=ratio,
            wall_ms=(time.perf_counter() - t0) * 1000.0 if tc.record_timing else 0.0,
            seed=tc.seed,
        )
        if not record.is_finite():
            raise NumericAbort(f"iteration {it}: non-finite metrics", record)
        yield record
