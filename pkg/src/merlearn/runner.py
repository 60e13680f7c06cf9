"""Run orchestration: config -> dataset -> learner -> run directory.

A run directory holds ``manifest.json`` (resolved config, overrides as
given, dataset checksum, split hash, code version), ``metrics.csv`` and
``checkpoint.bin``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import os
import shutil
import tempfile
import urllib.request
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from merlearn import __version__, config as cfgmod
from merlearn.checkpoint import load_checkpoint, save_checkpoint
from merlearn.episodes import (
    CharacterStore,
    RegressionTaskSpec,
    SplitSpec,
    load_omniglot,
    rng_stream,
    synthetic_store,
)
from merlearn.errors import ConfigError, IngestionError, MerError, NumericAbort
from merlearn.maml import (
    ClassificationTasks,
    MamlArch,
    MamlModel,
    MamlTrainConfig,
    MerMamlConfig,
    RegressionTasks,
    evaluate_maml,
    train_maml,
)
from merlearn.mann import MannArch, MannModel, MannTrainConfig, MerMannConfig, evaluate_mann, train_mann
from merlearn.metrics import RATIO_AGGREGATION, CsvLog, MetricsRecord, RunManifest

DATA_ENV = "MERLEARN_DATA"
DEFAULT_DATA_ROOT = Path("data") / "omniglot"

OMNIGLOT_BASE_URL = "https://raw.githubusercontent.com/brendenlake/omniglot/master/python"
OMNIGLOT_ARCHIVES = {
    "images_background": "68d2efa1b9178cc56df9314c21c6e718",
    "images_evaluation": "6b91aef0f799c5bb55b94e3f2daec811",
}

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
CHECKPOINT = "checkpoint.bin"


# -- datasets ---------------------------------------------------------------


def data_root(cfg: Mapping[str, Any]) -> Path:
    if cfg["data.root"]:
        return Path(cfg["data.root"])
    return Path(os.environ.get(DATA_ENV) or DEFAULT_DATA_ROOT)


def restrict_train(store: CharacterStore, n: int) -> CharacterStore:
    """Keep the first ``n`` training classes; the rest are never sampled."""
    keep = set(store.classes_in("train")[:n])
    split_of = {c: s if s != "train" or c in keep else "unused" for c, s in store.split_of.items()}
    return CharacterStore(store.class_ids, store.images, split_of, f"{store.source}|train[:{n}]")


def load_store(cfg: Mapping[str, Any]) -> CharacterStore:
    split = SplitSpec(*cfgmod.split_counts(cfg["data.split"]))
    if cfg["dataset"] == "fixture":
        store = synthetic_store(cfg["data.fixture_classes"], cfg["data.fixture_images"], split, cfg["data.split_seed"])
    elif cfg["dataset"] == "omniglot":
        store = load_omniglot(data_root(cfg), split, cfg["data.split_seed"])
    else:
        raise ConfigError("dataset", f"{cfg['dataset']} has no character store")
    if cfg["data.train_classes"]:
        store = restrict_train(store, cfg["data.train_classes"])
    return store


def regression_spec(cfg: Mapping[str, Any]) -> RegressionTaskSpec:
    return RegressionTaskSpec(interval_width=cfg["regression.interval_width"], seed=cfg["regression.task_seed"])


@dataclass
class Dataset:
    checksum: str
    split_hash: str
    store: CharacterStore | None = None
    regression: RegressionTaskSpec | None = None


def load_dataset(cfg: Mapping[str, Any]) -> Dataset:
    if cfg["dataset"] == "synth_regression":
        spec = regression_spec(cfg)
        digest = hashlib.sha256(repr(asdict(spec)).encode()).hexdigest()
        return Dataset(digest, digest, regression=spec)
    store = load_store(cfg)
    return Dataset(store.checksum(), store.assignment_hash(), store=store)


# -- learners ---------------------------------------------------------------


@dataclass
class Learner:
    """A model plus the bound training/evaluation procedures for one config."""

    kind: str
    model: Any
    arch: Any
    train: Callable[[], Iterator[MetricsRecord]]
    evaluate: Callable[[str, int, int], dict]
    metric: str = "accuracy"
    extra: dict = field(default_factory=dict)


def mann_configs(cfg) -> tuple[MannArch, MannTrainConfig, MerMannConfig]:
    arch = MannArch(cfg["n_way"], conv_blocks=cfg["model.conv_blocks"], filters=cfg["model.filters"],
                    latent=cfg["model.latent"], hidden=cfg["model.hidden"], query_label=cfg["model.query_label"])
    tc = MannTrainConfig(k_shot=cfg["k_shot"], q_queries=cfg["q_queries"], label_mode=cfg["label_mode"],
                         meta_batch=cfg["meta_batch"], iterations=cfg["iterations"], adam_lr=cfg["optim.adam_lr"],
                         eval_every=cfg["eval_every"], eval_episodes=cfg["eval_episodes"], seed=cfg["seed"],
                         record_timing=cfg["log_timing"])
    mer = MerMannConfig(cfg["mer.method"], lam=cfg["mer.lambda"], eta=cfg["mer.eta"], eps_z=cfg["mer.eps"],
                        cap_factor=cfg["mer.cap_factor"], reduction=cfg["mer.reduction"])
    return arch, tc, mer


def maml_configs(cfg) -> tuple[MamlArch, MamlTrainConfig, MerMamlConfig | None]:
    regression = cfg["dataset"] == "synth_regression"
    arch = MamlArch(cfg["n_way"], task="regression" if regression else "classification",
                    conv_blocks=cfg["model.conv_blocks"], filters=cfg["model.filters"],
                    hidden=cfg["model.mlp_hidden"])
    tc = MamlTrainConfig(k_shot=cfg["k_shot"], q_queries=cfg["q_queries"], label_mode=cfg["label_mode"],
                         meta_batch=cfg["meta_batch"], iterations=cfg["iterations"], alpha=cfg["optim.alpha"],
                         beta=cfg["optim.beta"], inner_steps=cfg["optim.inner_steps"],
                         eval_inner_steps=cfg["optim.eval_inner_steps"], first_order=cfg["optim.first_order"],
                         outer=cfg["optim.outer"], eval_every=cfg["eval_every"], eval_episodes=cfg["eval_episodes"],
                         noise_sd=cfg["regression.noise_sd"], seed=cfg["seed"], record_timing=cfg["log_timing"])
    mer = None
    if cfg["mer.method"] == "mer":
        mer = MerMamlConfig(lam=cfg["mer.lambda"], eta=cfg["mer.eta"], k_pairs=cfg["mer.k_pairs"],
                            eps_z=cfg["mer.eps"], abs_form=cfg["mer.abs_form"], simple=cfg["learner"] == "maml_simple")
    return arch, tc, mer


def build_learner(cfg: Mapping[str, Any], data: Dataset, params=None) -> Learner:
    """Fresh (or checkpoint-restored, via ``params``) learner for ``cfg``."""
    init_rng = rng_stream(cfg["seed"], "init")
    if cfg["learner"] == "mann":
        arch, tc, mer = mann_configs(cfg)
        model = MannModel(arch, params) if params is not None else MannModel.init(arch, init_rng)

        def evaluate(split, n_episodes, seed):
            acc, std = evaluate_mann(model, data.store, split, n_episodes, rng_stream(seed, "eval", split),
                                     tc.k_shot, tc.q_queries, tc.label_mode)
            return {"pre": None, "post": acc, "std": std}

        return Learner("mann", model, arch, lambda: train_mann(model, data.store, tc, mer), evaluate)

    arch, tc, mer = maml_configs(cfg)
    model = MamlModel(arch, params, tc.inner_steps, tc.alpha) if params is not None \
        else MamlModel.init(arch, init_rng, tc.inner_steps, tc.alpha)
    if data.regression is not None:
        tasks = RegressionTasks(data.regression, tc.k_shot, tc.q_queries, tc.noise_sd)
        metric = "mse"
    else:
        tasks = ClassificationTasks(data.store, arch.n_way, tc.k_shot, tc.q_queries, tc.label_mode)
        metric = "accuracy"

    def evaluate(split, n_episodes, seed):
        out = evaluate_maml(model.params, tasks, split, n_episodes, tc.eval_inner_steps,
                            rng_stream(seed, "eval", split), arch, tc.alpha)
        return {"pre": out["pre_acc"], "post": out["post_acc"], "std": out["std"]}

    return Learner(cfg["learner"], model, arch, lambda: train_maml(model, tasks, tc, mer), evaluate, metric)


# -- train ------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    iterations: int
    status: str
    last: MetricsRecord | None


def _manifest(cfg, data: Dataset, overrides: Sequence[str], source: str | None, metric: str, status: str) -> RunManifest:
    notes = {
        "status": status,
        "source": source or "",
        "overrides": list(overrides),
        "metric": metric,
        "ratio_aggregation": RATIO_AGGREGATION,
    }
    return RunManifest(dict(cfg), data.checksum, __version__, data.split_hash, notes)


def run_training(cfg: Mapping[str, Any], overrides: Sequence[str] = (), source: str | None = None,
                 progress: Callable[[MetricsRecord], None] | None = None) -> RunResult:
    """Train per ``cfg`` into ``cfg['out_dir']``. Raises NumericAbort after writing what was logged."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    learner = build_learner(cfg, data)
    _manifest(cfg, data, overrides, source, learner.metric, "running").write(out / MANIFEST)
    log = CsvLog(out / METRICS)
    last = None
    try:
        for record in learner.train():
            log.append(record)
            last = record
            if progress:
                progress(record)
            if cfg["eval_every"] and record.iteration % cfg["eval_every"] == 0:
                log.flush()
    except NumericAbort as exc:
        log.flush()
        m = _manifest(cfg, data, overrides, source, learner.metric, f"aborted: {exc}")
        if exc.record is not None:
            m.notes["abort_record"] = {k: repr(v) for k, v in asdict(exc.record).items()}
        m.write(out / MANIFEST)
        raise
    log.flush()
    save_checkpoint(out / CHECKPOINT, learner.model.params,
                    {"learner": cfg["learner"], "config": dict(cfg), "dataset_checksum": data.checksum})
    _manifest(cfg, data, overrides, source, learner.metric, "complete").write(out / MANIFEST)
    return RunResult(out, len(log.records), "complete", last)


def config_from_manifest(path, out_dir: str | None = None) -> dict:
    manifest = RunManifest.read(path)
    values = {k: v for k, v in manifest.config.items() if k in cfgmod.SCHEMA}
    if out_dir is not None:
        values["out_dir"] = out_dir
    return cfgmod.resolve(values)


# -- eval -------------------------------------------------------------------

EVAL_COLUMNS = ("checkpoint", "learner", "split", "episodes", "seed", "metric", "pre", "post", "std")


def evaluate_checkpoint(path, split: str, n_episodes: int, seed: int, overrides: Sequence[str] = ()) -> dict:
    params, meta = load_checkpoint(path)
    if "config" not in meta:
        raise ConfigError("checkpoint", f"{path} carries no config")
    values = {k: v for k, v in meta["config"].items() if k in cfgmod.SCHEMA}
    for item in overrides:
        k, v = cfgmod.parse_override(item)
        if k == "learner" and v != values.get("learner"):
            raise ConfigError("learner", f"checkpoint was trained as {values.get('learner')}, not {v}")
        values[k] = v
    cfg = cfgmod.resolve(values)
    if (meta["config"]["dataset"] == "synth_regression") != (cfg["dataset"] == "synth_regression"):
        raise ConfigError("dataset", f"a {cfg['learner']} checkpoint trained on {meta['config']['dataset']} "
                          f"cannot be evaluated on {cfg['dataset']}")
    data = load_dataset(cfg)
    learner = build_learner(cfg, data, params)
    res = learner.evaluate(split, n_episodes, seed)
    return {"checkpoint": str(path), "learner": cfg["learner"], "split": split, "episodes": n_episodes,
            "seed": seed, "metric": learner.metric, **res}


def append_eval_row(row: Mapping[str, Any], path) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(EVAL_COLUMNS)
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in EVAL_COLUMNS])


def format_eval(row: Mapping[str, Any]) -> str:
    name = "mse" if row["metric"] == "mse" else "acc"
    if row["pre"] is None:
        return f"{row['split']} {name} {row['post']:.4f} ± {row['std']:.4f} ({row['episodes']} episodes)"
    return (f"{row['split']} pre-adaptation {name} {row['pre']:.4f}, post-adaptation {name} "
            f"{row['post']:.4f} ± {row['std']:.4f} ({row['episodes']} episodes)")


# -- sweep ------------------------------------------------------------------


def parse_grid(items: Sequence[str]) -> dict[str, list[str]]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "grid axis must look like key=v1,v2,...")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in cfgmod.SCHEMA:
            raise ConfigError(key, "unknown key")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(key, "grid axis has no values")
        grid[key] = values
    if not grid:
        raise ConfigError("grid", "at least one axis is required")
    return grid


@dataclass
class SweepRow:
    cell: int
    settings: dict
    status: str
    pre: float | None = None
    post: float | None = None
    std: float | None = None


def run_sweep(source: str | None, overrides: Sequence[str], grid: Mapping[str, Sequence[str]], out_dir,
              split: str = "val", n_episodes: int | None = None,
              progress: Callable[[str], None] | None = None) -> tuple[list[SweepRow], str]:
    """Train and evaluate every grid cell; failures are recorded, not raised."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    rows, metric = [], "accuracy"
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        settings = dict(zip(keys, combo))
        cell_overrides = list(overrides) + [f"{k}={v}" for k, v in settings.items()] + [f"out_dir={out / f'cell-{i:03d}'}"]
        try:
            cfg, _ = cfgmod.load(source, cell_overrides)
            run_training(cfg, cell_overrides, source)
            res = evaluate_checkpoint(Path(cfg["out_dir"]) / CHECKPOINT, split,
                                      n_episodes or cfg["test_episodes"], cfg["seed"])
            metric = res["metric"]
            rows.append(SweepRow(i, settings, "ok", res["pre"], res["post"], res["std"]))
        except MerError as exc:
            rows.append(SweepRow(i, settings, f"failed: {exc}"))
        if progress:
            progress(f"cell {i}: {settings} -> {rows[-1].status}")
    lower_better = metric == "mse"
    ok = sorted((r for r in rows if r.status == "ok"), key=lambda r: r.post if lower_better else -r.post)
    rows = ok + [r for r in rows if r.status != "ok"]
    write_sweep_tables(rows, keys, metric, out)
    return rows, metric


def write_sweep_tables(rows: Sequence[SweepRow], keys: Sequence[str], metric: str, out: Path) -> None:
    cols = ["cell", *keys, f"pre_{metric}", f"post_{metric}", "std", "status"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    fmt = lambda v: "" if v is None else repr(v)
    for r in rows:
        w.writerow([r.cell, *(r.settings[k] for k in keys), fmt(r.pre), fmt(r.post), fmt(r.std), r.status])
    (out / "sweep.csv").write_text(buf.getvalue())

    short = lambda v: "" if v is None else f"{v:.4f}"
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [str(r.cell), *(r.settings[k] for k in keys), short(r.pre), short(r.post), short(r.std), r.status]
        md.append("| " + " | ".join(c.replace("|", "/") for c in cells) + " |")
    (out / "sweep.md").write_text("\n".join(md) + "\n")


# -- dataset download -------------------------------------------------------


def fetch_omniglot(root, base_url: str = OMNIGLOT_BASE_URL, archives: Mapping[str, str] = OMNIGLOT_ARCHIVES,
                   log: Callable[[str], None] = lambda _: None) -> Path:
    """Download, md5-verify and unpack the Omniglot archives under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, md5 in archives.items():
        if (root / name).is_dir():
            log(f"{name}: already present")
            continue
        url = f"{base_url.rstrip('/')}/{name}.zip"
        log(f"{name}: downloading {url}")
        try:
            with urllib.request.urlopen(url) as resp:
                blob = resp.read()
        except OSError as exc:
            raise IngestionError(f"download failed for {url}: {exc}", [url]) from exc
        digest = hashlib.md5(blob).hexdigest()
        if digest != md5:
            raise IngestionError(f"checksum mismatch for {url}: expected {md5}, got {digest}", [url])
        with tempfile.TemporaryDirectory(dir=root) as tmp:
            with zipfile.ZipFile(io.BytesIO(blob)) as zf:
                zf.extractall(tmp)
            unpacked = Path(tmp) / name
            if not unpacked.is_dir():
                raise IngestionError(f"{url} does not contain a top-level {name}/ directory", [url])
            shutil.move(str(unpacked), root / name)
        log(f"{name}: ok")
    return root
