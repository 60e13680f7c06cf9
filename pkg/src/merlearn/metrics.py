"""Memorization diagnostics, run records and their on-disk formats."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from merlearn.errors import DimensionError, MerError

EPS_Z = 1e-6

# Aggregate ratios divide the mean off-diagonal distance of one set of task
# vectors by the mean off-diagonal distance of the other (not a mean of ratios).
RATIO_AGGREGATION = "mean_offdiag(d_numerator) / max(mean_offdiag(d_denominator), 1e-6)"


@dataclass
class MetricsRecord:
    iteration: int
    task_loss: float
    reg_loss: float
    total_loss: float
    train_acc: float
    train_pre_acc: float = 0.0
    val_pre_acc: float = 0.0
    val_post_acc: float = 0.0
    hz_ratio: float = 0.0
    phi_enc_ratio: float = 0.0
    mean_phi_distance: float = 0.0
    wall_ms: float = 0.0
    seed: int = 0

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))


COLUMNS = tuple(f.name for f in fields(MetricsRecord))
_INT_COLUMNS = {"iteration", "seed"}


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def pairwise_distance_matrix(vectors) -> np.ndarray:
    x = _as_array(vectors)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def mean_offdiag(d: np.ndarray) -> float:
    m = d.shape[0]
    return float((d.sum() - np.trace(d)) / (m * (m - 1)))


def distance_ratio(numerator_vectors, denominator_vectors, eps: float = EPS_Z) -> float:
    a, b = _as_array(numerator_vectors), _as_array(denominator_vectors)
    if a.shape[0] < 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"distance ratio needs >= 2 paired tasks, got {a.shape[0]} and {b.shape[0]}")
    return mean_offdiag(pairwise_distance_matrix(a)) / max(mean_offdiag(pairwise_distance_matrix(b)), eps)


def hz_ratio(trace, eps: float = EPS_Z) -> float:
    """Mean pairwise task-summary distance over mean pairwise latent distance."""
    h = _as_array(trace.h)
    if h.shape[0] < 2:
        raise DimensionError("hz_ratio needs at least two tasks")
    return distance_ratio(h, trace.z, eps)


# -- CSV --------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(name: str, value) -> str:
    if name in _INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


def write_csv(records: Iterable[MetricsRecord], path) -> None:
    lines = [",".join(COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(c, getattr(r, c)) for c in COLUMNS))
    try:
        _atomic_write_text(Path(path), "\n".join(lines) + "\n")
    except OSError as exc:
        raise MerError(f"cannot write metrics CSV {path}: {exc}") from exc


def read_csv(path) -> list[MetricsRecord]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise MerError(f"{path}: unexpected header {reader.fieldnames}")
            return [
                MetricsRecord(**{c: int(row[c]) if c in _INT_COLUMNS else float(row[c]) for c in COLUMNS})
                for row in reader
            ]
    except OSError as exc:
        raise MerError(f"cannot read metrics CSV {path}: {exc}") from exc


class CsvLog:
    """Accumulates records and rewrites the CSV atomically on flush."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: list[MetricsRecord] = []

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise MerError(f"iteration {record.iteration} does not increase")
        self.records.append(record)

    def flush(self) -> None:
        write_csv(self.records, self.path)


# -- manifest ---------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    dataset_checksum: str
    code_version: str
    split_hash: str
    notes: dict

    def write(self, path) -> None:
        _atomic_write_text(Path(path), json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)


# -- SVG curves -------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def render_curves(csv_path, columns: Sequence[str], out_path, x_column: str = "iteration") -> Path:
    """Line chart of ``columns`` against ``x_column`` as a standalone SVG."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    for c in [x_column, *columns]:
        if c not in header:
            raise MerError(f"column {c!r} not found in {csv_path}")
    xs = np.array([float(r[x_column]) for r in rows])
    ys = {c: np.array([float(r[c]) for r in rows]) for c in columns}

    W, H, left, right, top, bottom = 640, 400, 60, 150, 30, 50
    pw, ph = W - left - right, H - top - bottom
    all_y = np.concatenate(list(ys.values())) if rows else np.zeros(1)
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if y_hi - y_lo < 1e-12:
        pad = max(abs(y_lo) * 0.5, 0.5)
        y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = (float(xs.min()), float(xs.max())) if rows else (0.0, 1.0)
    if x_hi - x_lo < 1e-12:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (y_hi - y) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(x_column)}</text>',
        f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {top + ph / 2})">value</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        xv = x_lo + frac * (x_hi - x_lo)
        parts.append(f'<text x="{left - 6}" y="{py(yv) + 4:.2f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        parts.append(f'<text x="{px(xv):.2f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
    for i, c in enumerate(columns):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys[c]))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"><title>{escape(c)}</title></polyline>')
        ly = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text class="legend" x="{left + pw + 38}" y="{ly + 4}" font-size="11">{escape(c)}</text>')
    parts.append("</svg>")
    out = Path(out_path)
    _atomic_write_text(out, "\n".join(parts) + "\n")
    return out
