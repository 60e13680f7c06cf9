"""Parameter checkpoints shared by both learners.

Layout: the line ``MERCKPT 1``, one line of JSON describing every entry
(name, shape, segment) plus free-form metadata, then the raw little-endian
float64 values of all entries concatenated in header order.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from merlearn.errors import FormatError
from merlearn.tensorcore import ParamSet

MAGIC = b"MERCKPT 1\n"


def save_checkpoint(path, params: ParamSet, meta: dict) -> Path:
    path = Path(path)
    entries = [{"name": k, "shape": list(params[k].shape), "segment": params.segment_of(k)} for k in params]
    header = json.dumps({"entries": entries, "meta": meta}, sort_keys=True).encode()
    payload = params.flatten().astype("<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + header + b"\n" + payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    """Returns (tracked leaf parameters, metadata)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic line)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    values = np.frombuffer(blob[end + 1:], dtype="<f8")
    arrays, segments, offset = {}, {}, 0
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if offset + n > values.size:
            raise FormatError(f"{path}: payload too short for entry {e['name']!r}")
        arrays[e["name"]] = values[offset:offset + n].reshape(e["shape"]).astype(np.float64)
        segments[e["name"]] = e["segment"]
        offset += n
    if offset != values.size:
        raise FormatError(f"{path}: {values.size - offset} trailing values after last entry")
    return ParamSet.leaves(arrays, segments), header.get("meta", {})
