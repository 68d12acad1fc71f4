"""On-disk formats.

Binary arrays (checkpoints, curvature matrices) are written as::

    b"IFLADDR1" | uint64 LE header length | UTF-8 JSON header | float64 LE payload

The header always carries ``shape``; everything else is caller metadata.
CSV files use '.' decimals, LF line endings and a header row; floats are
written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IFLADDR1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    return sha256_bytes(str(a.dtype).encode() + str(a.shape).encode() + a.tobytes())


def write_array(path: str | Path, array: np.ndarray, header: dict | None = None) -> str:
    """Write ``array`` as float64 LE with a JSON header; returns the file's sha256."""
    array = np.ascontiguousarray(array, dtype="<f8")
    meta = dict(header or {})
    meta["shape"] = list(array.shape)
    blob = canonical_json(meta).encode()
    data = MAGIC + struct.pack("<Q", len(blob)) + blob + array.tobytes()
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def read_array(path: str | Path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an ifladder array file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode())
    arr = np.frombuffer(data[16 + n:], dtype="<f8").reshape(header["shape"]).copy()
    return arr, header


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if np.isfinite(x) else ("nan" if np.isnan(x) else ("inf" if x > 0 else "-inf"))
    return str(x)


def write_csv(path: str | Path, columns, rows) -> str:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return sha256_file(path)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())
