"""Character datasets, N-way K-shot episode sampling and a synthetic regression family.

Images follow the Omniglot on-disk layout ``root/<alphabet>/<character>/<img>.png``.
They are decoded to grayscale, resized to 28x28 (bilinear) and inverted so
strokes are near 1 and background near 0.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from merlearn.errors import FormatError, IngestionError, SamplingError, SplitError

IMAGE_SIZE = 28
SPLITS = ("train", "val", "test")
PREPROCESSING = "grayscale, bilinear resize to 28x28, invert (1 - v/255)"


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; keys may be ints or strings."""
    words = [int(seed)]
    for k in keys:
        words.append(k if isinstance(k, int) else zlib.crc32(str(k).encode()))
    return np.random.default_rng(np.random.SeedSequence(words))


class LabelMode(str, enum.Enum):
    FIXED = "fixed"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise SplitError(f"split sizes must be non-negative, got {self}")

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


# split used by the MAML experiments and the one reported for MANN
MAML_SPLIT = SplitSpec(1100, 100, 423)
MANN_SPLIT = SplitSpec(1200, 400, 23)


@dataclass(frozen=True, eq=False)
class CharacterStore:
    """Immutable set of character classes, each with its images and split."""

    class_ids: tuple[str, ...]
    images: tuple[np.ndarray, ...]
    split_of: dict[str, str]
    source: str = ""

    def __post_init__(self):
        for arr in self.images:
            arr.setflags(write=False)

    def classes_in(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise SplitError(f"unknown split {split!r}")
        return [c for c in self.class_ids if self.split_of[c] == split]

    @cached_property
    def _index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.class_ids)}

    def images_of(self, class_id: str) -> np.ndarray:
        return self.images[self._index[class_id]]

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.classes_in(s)) for s in SPLITS}

    def fixed_groups(self, split: str, n_way: int) -> list[list[str]]:
        """Disjoint groups of ``n_way`` classes; label index = position in group.

        Leftover classes that do not fill a group are never sampled in
        fixed mode.
        """
        classes = self.classes_in(split)
        n = len(classes) // n_way
        return [classes[g * n_way:(g + 1) * n_way] for g in range(n)]

    def fixed_label_table(self, split: str, n_way: int) -> dict[str, int]:
        return {c: pos for group in self.fixed_groups(split, n_way) for pos, c in enumerate(group)}

    def assignment_hash(self) -> str:
        h = hashlib.sha256()
        for c in sorted(self.class_ids):
            h.update(f"{c}:{self.split_of[c]}\n".encode())
        return h.hexdigest()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for c, arr in zip(self.class_ids, self.images):
            h.update(c.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _assign_splits(class_ids: Sequence[str], split_spec: SplitSpec, seed: int) -> dict[str, str]:
    if split_spec.total > len(class_ids):
        raise SplitError(f"split needs {split_spec.total} classes but only {len(class_ids)} are available")
    order = rng_stream(seed, "split").permutation(len(class_ids))
    split_of = {}
    bounds = np.cumsum([0, split_spec.n_train, split_spec.n_val, split_spec.n_test])
    for s, name in enumerate(SPLITS):
        for i in order[bounds[s]:bounds[s + 1]]:
            split_of[class_ids[i]] = name
    return split_of


def _build_store(class_ids, images, split_spec, seed, source) -> CharacterStore:
    split_of = _assign_splits(class_ids, split_spec, seed)
    # classes outside the requested split counts are dropped
    keep = [i for i, c in enumerate(class_ids) if c in split_of]
    order = rng_stream(seed, "order").permutation(len(keep))
    ids = tuple(class_ids[keep[i]] for i in order)
    imgs = tuple(images[keep[i]] for i in order)
    return CharacterStore(ids, imgs, {c: split_of[c] for c in ids}, source)


def preprocess(img: Image.Image) -> np.ndarray:
    gray = img.convert("L").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return 1.0 - np.asarray(gray, dtype=np.float64) / 255.0


def load_omniglot(root_path, split_spec: SplitSpec, seed: int) -> CharacterStore:
    """Load an Omniglot-style directory tree and split its classes by ``seed``."""
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root is not a directory: {root}", [root])
    class_ids, images, bad = [], [], []
    # the official archives unpack to images_background/ and images_evaluation/
    alphabets = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        alphabets.extend(sorted(p for p in d.iterdir() if p.is_dir()) if d.name.startswith("images_") else [d])
    for alphabet in alphabets:
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(p for p in character.iterdir() if p.is_file() and not p.name.startswith("."))
            arrays = []
            for f in files:
                try:
                    with Image.open(f) as im:
                        arrays.append(preprocess(im))
                except Exception:
                    bad.append(f)
            if not files:
                bad.append(character)
                continue
            if arrays:
                class_ids.append(f"{alphabet.name}/{character.name}")
                images.append(np.stack(arrays))
    if bad:
        raise IngestionError(f"{len(bad)} missing or unreadable entries under {root}", bad)
    if not class_ids:
        raise IngestionError(f"no character directories found under {root}", [root])
    return _build_store(class_ids, images, split_spec, seed, str(root))


# -- synthetic glyphs -------------------------------------------------------

GLYPH_CANVAS = 56


def _glyph_strokes(rng: np.random.Generator) -> list[np.ndarray]:
    n = int(rng.integers(2, 5))
    return [rng.uniform(0.15, 0.85, size=(3, 2)) for _ in range(n)]


def _render_glyph(strokes, rng: np.random.Generator) -> Image.Image:
    """Black-on-white rendering of jittered quadratic strokes."""
    size = GLYPH_CANVAS
    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    angle = rng.normal(0, 0.12)
    scale = rng.uniform(0.9, 1.1)
    shift = rng.normal(0, 0.025, size=2)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]) * scale
    ts = np.linspace(0, 1, 16)[:, None]
    for ctrl in strokes:
        pts = ctrl + rng.normal(0, 0.02, size=ctrl.shape)
        curve = (1 - ts) ** 2 * pts[0] + 2 * ts * (1 - ts) * pts[1] + ts ** 2 * pts[2]
        curve = (curve - 0.5) @ rot.T + 0.5 + shift
        xy = [tuple(p) for p in (curve * size)]
        draw.line(xy, fill=0, width=4)
    return img


def synthetic_glyphs(n_classes: int, images_per_class: int, seed: int) -> tuple[list[str], list[list[Image.Image]]]:
    ids, renders = [], []
    for c in range(n_classes):
        rng = rng_stream(seed, "glyph", c)
        strokes = _glyph_strokes(rng)
        ids.append(f"synthetic_{c // 20:02d}/character{c % 20:02d}")
        renders.append([_render_glyph(strokes, rng) for _ in range(images_per_class)])
    return ids, renders


def synthetic_store(n_classes: int, images_per_class: int, split_spec: SplitSpec, seed: int) -> CharacterStore:
    """Procedurally generated glyph classes, processed exactly like loaded files."""
    ids, renders = synthetic_glyphs(n_classes, images_per_class, seed)
    images = [np.stack([preprocess(im) for im in imgs]) for imgs in renders]
    return _build_store(ids, images, split_spec, seed, f"synthetic:{n_classes}x{images_per_class}:{seed}")


def write_glyph_tree(root, n_classes: int, images_per_class: int, seed: int) -> Path:
    """Write synthetic glyphs as ``root/<alphabet>/<character>/<n>.png``."""
    root = Path(root)
    ids, renders = synthetic_glyphs(n_classes, images_per_class, seed)
    for cid, imgs in zip(ids, renders):
        d = root / cid
        d.mkdir(parents=True, exist_ok=True)
        for n, im in enumerate(imgs):
            im.save(d / f"{n:02d}.png")
    return root


# -- episodes ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Episode:
    support_x: np.ndarray           # [N*K, 1, H, W]
    support_y: np.ndarray           # [N*K, N] one-hot
    query_x: np.ndarray             # [N*Q, 1, H, W]
    query_y: np.ndarray             # [N*Q, N] one-hot
    n_way: int
    k_shot: int
    q_queries: int
    mode: LabelMode
    class_ids: tuple[str, ...] = ()  # class_ids[label] is the class carrying that label

    def same_bytes(self, other: "Episode") -> bool:
        return all(
            getattr(self, f).tobytes() == getattr(other, f).tobytes()
            for f in ("support_x", "support_y", "query_x", "query_y")
        ) and self.class_ids == other.class_ids


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def sample_episode(
    store: CharacterStore,
    split: str,
    n_way: int,
    k_shot: int,
    q_queries: int,
    mode: LabelMode | str,
    rng: np.random.Generator,
) -> Episode:
    mode = LabelMode(mode)
    if mode is LabelMode.FIXED:
        groups = store.fixed_groups(split, n_way)
        if not groups:
            raise SamplingError(f"split {split!r} has fewer than {n_way} classes")
        by_label = list(groups[int(rng.integers(len(groups)))])
    else:
        classes = store.classes_in(split)
        if len(classes) < n_way:
            raise SamplingError(f"split {split!r} has {len(classes)} classes, need {n_way}")
        chosen = rng.choice(len(classes), size=n_way, replace=False)
        perm = rng.permutation(n_way)
        by_label = [None] * n_way
        for pos, ci in enumerate(chosen):
            by_label[perm[pos]] = classes[ci]

    sx, sy, qx, qy = [], [], [], []
    for label, cid in enumerate(by_label):
        imgs = store.images_of(cid)
        need = k_shot + q_queries
        if len(imgs) < need:
            raise SamplingError(f"class {cid!r} has {len(imgs)} images, need {need}")
        pick = rng.choice(len(imgs), size=need, replace=False)
        sx.extend(imgs[pick[:k_shot]])
        qx.extend(imgs[pick[k_shot:]])
        sy.extend([label] * k_shot)
        qy.extend([label] * q_queries)
    s_order = rng.permutation(len(sy))
    q_order = rng.permutation(len(qy))
    sx, sy = np.stack(sx)[s_order][:, None], np.asarray(sy)[s_order]
    qx, qy = np.stack(qx)[q_order][:, None], np.asarray(qy)[q_order]
    return Episode(sx, _one_hot(sy, n_way), qx, _one_hot(qy, n_way), n_way, k_shot, q_queries, mode, tuple(by_label))


def sample_batch(store, split, n_way, k_shot, q_queries, mode, rng, size: int) -> list[Episode]:
    return [sample_episode(store, split, n_way, k_shot, q_queries, mode, rng) for _ in range(size)]


# -- episode dump -----------------------------------------------------------

EPISODE_MAGIC = b"MEREPISODE 1\n"
_EPISODE_ARRAYS = ("support_x", "support_y", "query_x", "query_y")


def dump_episode(episode: Episode, path) -> None:
    """Magic line, one-line JSON header, then little-endian float64 payload."""
    header = {
        "n_way": episode.n_way,
        "k_shot": episode.k_shot,
        "q_queries": episode.q_queries,
        "mode": episode.mode.value,
        "label_table": {cid: i for i, cid in enumerate(episode.class_ids)},
        "arrays": [{"name": n, "shape": list(getattr(episode, n).shape)} for n in _EPISODE_ARRAYS],
        "dtype": "<f8",
    }
    buf = io.BytesIO()
    buf.write(EPISODE_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for n in _EPISODE_ARRAYS:
        buf.write(np.ascontiguousarray(getattr(episode, n), dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_episode(path) -> Episode:
    raw = Path(path).read_bytes()
    if not raw.startswith(EPISODE_MAGIC):
        raise FormatError(f"{path}: not an episode dump")
    end = raw.index(b"\n", len(EPISODE_MAGIC))
    header = json.loads(raw[len(EPISODE_MAGIC):end])
    offset = end + 1
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(spec["shape"]).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: payload length mismatch")
    table = header["label_table"]
    class_ids = tuple(sorted(table, key=table.get))
    return Episode(
        arrays["support_x"], arrays["support_y"], arrays["query_x"], arrays["query_y"],
        header["n_way"], header["k_shot"], header["q_queries"], LabelMode(header["mode"]), class_ids,
    )


# -- synthetic regression ---------------------------------------------------


@dataclass(frozen=True)
class RegressionTaskSpec:
    """Sinusoid tasks whose inputs come from a private interval per task id.

    Because the interval identifies the task, a single function of x can
    solve every training task: the family is non-mutually-exclusive.
    """

    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, math.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    interval_width: float = 0.5
    seed: int = 0

    @property
    def n_tasks(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.interval_width))

    def task(self, task_id: int) -> tuple[float, float, float, float]:
        """(amplitude, phase, x_lo, x_hi) for ``task_id``."""
        if not 0 <= task_id < self.n_tasks:
            raise SamplingError(f"task_id {task_id} outside [0, {self.n_tasks})")
        rng = rng_stream(self.seed, "regression-task", task_id)
        amp = float(rng.uniform(*self.amplitude_range))
        phase = float(rng.uniform(*self.phase_range))
        lo = self.x_range[0] + task_id * self.interval_width
        return amp, phase, lo, lo + self.interval_width


@dataclass(frozen=True, eq=False)
class RegressionEpisode:
    support_x: np.ndarray  # [K, 1]
    support_y: np.ndarray  # [K, 1]
    query_x: np.ndarray
    query_y: np.ndarray
    task_id: int


def regression_targets(spec: RegressionTaskSpec, task_id: int, x: np.ndarray, noise_sd: float, rng) -> np.ndarray:
    amp, phase, _, _ = spec.task(task_id)
    y = amp * np.sin(x + phase)
    if noise_sd > 0:
        y = y + rng.normal(0.0, noise_sd, size=np.shape(x))
    return y


def sample_regression_episode(
    spec: RegressionTaskSpec,
    task_id: int,
    k_shot: int,
    q_queries: int,
    noise_sd: float,
    rng: np.random.Generator,
) -> RegressionEpisode:
    _, _, lo, hi = spec.task(task_id)
    x = rng.uniform(lo, hi, size=(k_shot + q_queries, 1))
    y = regression_targets(spec, task_id, x, noise_sd, rng)
    return RegressionEpisode(x[:k_shot], y[:k_shot], x[k_shot:], y[k_shot:], task_id)
