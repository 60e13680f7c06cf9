"""Experiment configuration: a flat ``key.path = value`` text format.

Blank lines and ``#`` comments are ignored. Values are coerced by the
schema below; keys not in the schema are rejected. Entries whose default
is ``None`` take a learner-dependent default when the config is resolved.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from merlearn.episodes import MAML_SPLIT, MANN_SPLIT, LabelMode
from merlearn.errors import ConfigError

LEARNERS = ("mann", "maml", "maml_simple")
DATASETS = ("omniglot", "synth_regression", "fixture")
MANN_METHODS = ("none", "m1", "m2", "m3")
MAML_METHODS = ("none", "mer")


@dataclass(frozen=True)
class Field:
    kind: type
    default: Any
    choices: tuple | None = None
    doc: str = ""


SCHEMA: dict[str, Field] = {
    "learner": Field(str, "maml", LEARNERS),
    "dataset": Field(str, "fixture", DATASETS),
    "data.root": Field(str, "", doc="Omniglot root; empty means $MERLEARN_DATA, then ./data/omniglot"),
    "data.split": Field(str, None, doc="train,val,test class counts"),
    "data.split_seed": Field(int, 0),
    "data.train_classes": Field(int, 0, doc="keep only the first N training classes (0 = all)"),
    "data.fixture_classes": Field(int, 100),
    "data.fixture_images": Field(int, 20),
    "n_way": Field(int, 5),
    "k_shot": Field(int, 1),
    "q_queries": Field(int, 1),
    "label_mode": Field(str, "fixed", tuple(m.value for m in LabelMode)),
    "mer.method": Field(str, "none", MANN_METHODS + MAML_METHODS[1:]),
    "mer.lambda": Field(float, None),
    "mer.eta": Field(float, 1.0),
    "mer.k_pairs": Field(int, 4),
    "mer.abs_form": Field(bool, False),
    "mer.eps": Field(float, 1e-6),
    "mer.cap_factor": Field(float, 10.0),
    "mer.reduction": Field(str, "sum", ("sum", "mean"), doc="mann pair reduction"),
    "optim.alpha": Field(float, 0.04),
    "optim.beta": Field(float, 0.0025),
    "optim.outer": Field(str, "sgd", ("sgd", "adam")),
    "optim.adam_lr": Field(float, 0.001),
    "optim.inner_steps": Field(int, 1),
    "optim.eval_inner_steps": Field(int, None),
    "optim.first_order": Field(bool, False),
    "meta_batch": Field(int, None),
    "iterations": Field(int, 1000),
    "eval_every": Field(int, 100),
    "eval_episodes": Field(int, 100),
    "test_episodes": Field(int, 600),
    "seed": Field(int, 0),
    "out_dir": Field(str, "runs/default"),
    "model.conv_blocks": Field(int, 4),
    "model.filters": Field(int, 32),
    "model.latent": Field(int, 64),
    "model.hidden": Field(int, 128, doc="MANN LSTM width"),
    "model.mlp_hidden": Field(int, 40, doc="regression MLP width"),
    "model.query_label": Field(str, "zero", ("zero", "uniform"), doc="MANN label slot for queries"),
    "regression.noise_sd": Field(float, 0.0),
    "regression.interval_width": Field(float, 0.5),
    "regression.task_seed": Field(int, 0),
    "log_timing": Field(bool, False, doc="record wall_ms (breaks byte-identical reruns)"),
}


def _split_text(spec) -> str:
    return f"{spec.n_train},{spec.n_val},{spec.n_test}"


_LEARNER_DEFAULTS = {
    "mann": {"meta_batch": 32, "mer.lambda": 1.0, "data.split": _split_text(MANN_SPLIT)},
    "maml": {"meta_batch": 10, "mer.lambda": 0.1, "data.split": _split_text(MAML_SPLIT)},
}
_FIXTURE_SPLIT = "50,25,25"


def _coerce(key: str, raw) -> Any:
    field = SCHEMA[key]
    if raw is None:
        return None
    if field.kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "yes", "1"):
            return True
        if text in ("false", "no", "0"):
            return False
        raise ConfigError(key, f"expected true/false, got {raw!r}")
    if field.kind in (int, float):
        try:
            value = field.kind(raw) if not isinstance(raw, str) else field.kind(raw.strip())
        except ValueError:
            raise ConfigError(key, f"expected {field.kind.__name__}, got {raw!r}") from None
        if field.kind is int and isinstance(raw, float) and raw != int(raw):
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return value
    text = str(raw).strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    if field.choices and text not in field.choices:
        raise ConfigError(key, f"must be one of {', '.join(field.choices)}; got {text!r}")
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({source}:{lineno})")
        values[key] = _coerce(key, raw)
    return values


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    return key, _coerce(key, raw)


def preset_names() -> list[str]:
    root = resources.files("merlearn") / "presets"
    names = []
    for group in sorted(p.name for p in root.iterdir() if p.is_dir()):
        for f in sorted((root / group).iterdir(), key=lambda p: p.name):
            if f.name.endswith(".cfg"):
                names.append(f"{group}/{f.name[:-4]}")
    return names


def read_source(name_or_path: str) -> str:
    """Text of a preset (``desk/...``, ``omniglot/...``) or of a config file."""
    path = Path(name_or_path)
    if path.is_file():
        return path.read_text()
    if name_or_path in preset_names():
        group, name = name_or_path.split("/", 1)
        return (resources.files("merlearn") / "presets" / group / f"{name}.cfg").read_text()
    raise ConfigError("config", f"no config file or preset named {name_or_path!r} (presets: {', '.join(preset_names())})")


def split_counts(value: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in value.split(","))
    except ValueError:
        raise ConfigError("data.split", f"expected three comma-separated integers, got {value!r}") from None
    if len(parts) != 3 or min(parts) < 0:
        raise ConfigError("data.split", f"expected three non-negative counts, got {value!r}")
    return parts


def resolve(values: Mapping[str, Any]) -> dict[str, Any]:
    """Fill defaults (including learner-dependent ones) and validate."""
    cfg = {k: f.default for k, f in SCHEMA.items()}
    cfg.update(values)
    family = "mann" if cfg["learner"] == "mann" else "maml"
    for k, v in _LEARNER_DEFAULTS[family].items():
        if cfg[k] is None:
            cfg[k] = v
    if cfg["dataset"] == "fixture" and "data.split" not in values:
        cfg["data.split"] = _FIXTURE_SPLIT
    if cfg["optim.eval_inner_steps"] is None:
        cfg["optim.eval_inner_steps"] = cfg["optim.inner_steps"]
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    positive = ("n_way", "k_shot", "q_queries", "meta_batch", "iterations", "eval_episodes",
                "model.filters", "model.latent", "model.hidden", "model.mlp_hidden",
                "data.fixture_classes", "data.fixture_images")
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(key, "must be >= 1")
    for key in ("eval_every", "test_episodes", "optim.inner_steps", "optim.eval_inner_steps",
                "data.train_classes", "model.conv_blocks"):
        if cfg[key] < 0:
            raise ConfigError(key, "must be >= 0")
    if cfg["n_way"] < 2:
        raise ConfigError("n_way", "must be >= 2")
    if cfg["mer.lambda"] < 0:
        raise ConfigError("mer.lambda", "must be >= 0")
    if cfg["mer.eta"] <= 0:
        raise ConfigError("mer.eta", "must be > 0")
    if cfg["mer.eps"] <= 0:
        raise ConfigError("mer.eps", "must be > 0")
    split_counts(cfg["data.split"])

    learner, method = cfg["learner"], cfg["mer.method"]
    if learner == "mann":
        if method not in MANN_METHODS:
            raise ConfigError("mer.method", f"mann accepts {', '.join(MANN_METHODS)}; got {method!r}")
        if cfg["optim.adam_lr"] <= 0:
            raise ConfigError("optim.adam_lr", "mann requires a positive Adam learning rate")
        if cfg["dataset"] == "synth_regression":
            raise ConfigError("dataset", "mann is a classifier; synth_regression needs learner=maml")
        if method != "none" and cfg["meta_batch"] < 2:
            raise ConfigError("meta_batch", f"method {method} needs at least 2 tasks per batch")
    else:
        if method not in MAML_METHODS:
            raise ConfigError("mer.method", f"{learner} accepts {', '.join(MAML_METHODS)}; got {method!r}")
        if cfg["optim.alpha"] <= 0:
            raise ConfigError("optim.alpha", "maml requires alpha > 0")
        if cfg["optim.beta"] < 0:
            raise ConfigError("optim.beta", "maml requires beta >= 0")
        if learner == "maml_simple" and method == "none":
            raise ConfigError("mer.method", "maml_simple is the regularized variant; set mer.method=mer")
        if method == "mer":
            if cfg["meta_batch"] < 2:
                raise ConfigError("meta_batch", "the regularizer needs at least 2 tasks per batch")
            if cfg["mer.lambda"] > 0 and cfg["mer.k_pairs"] < 1:
                raise ConfigError("mer.k_pairs", "must be >= 1 when mer.lambda > 0")
            if cfg["mer.k_pairs"] >= cfg["meta_batch"]:
                raise ConfigError("mer.k_pairs", f"must be < meta_batch ({cfg['meta_batch']})")
        if cfg["dataset"] == "synth_regression" and cfg["label_mode"] != "fixed":
            raise ConfigError("label_mode", "synth_regression has no labels to shuffle; use fixed")
    if cfg["dataset"] != "synth_regression" and cfg["model.conv_blocks"] < 1:
        raise ConfigError("model.conv_blocks", "image learners need at least one conv block")


def to_text(cfg: Mapping[str, Any]) -> str:
    """Serialize in schema order; ``parse_text(to_text(c)) == c`` for resolved configs."""
    lines = []
    for key in SCHEMA:
        if key not in cfg or cfg[key] is None:
            continue
        v = cfg[key]
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else (repr(v) if isinstance(v, float) else v)}")
    return "\n".join(lines) + "\n"


def load(source: str | None, overrides: Iterable[str] = ()) -> tuple[dict[str, Any], list[str]]:
    """Resolved config from an optional file/preset plus ``key=value`` overrides.

    Returns the config and the overrides exactly as given.
    """
    values = parse_text(read_source(source), source) if source else {}
    overrides = list(overrides)
    for item in overrides:
        k, v = parse_override(item)
        values[k] = v
    return resolve(values), overrides
