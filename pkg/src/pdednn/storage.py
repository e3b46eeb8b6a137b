"""Array persistence: ``manifest.json`` + raw little-endian column-major blobs.

Each array ``name`` is written to ``name.bin``.  The manifest catalog entry is::

    {"file": "name.bin", "rows": r, "cols": c, "shape": [...],
     "order": "col-major", "dtype": "f64" | "i64"}

with ``rows = shape[0]`` and ``cols`` the product of the remaining axes
(1 for vectors).  N-d arrays are flattened with ``ravel(order="F")``; the
``shape`` field restores them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError

SCHEMA_VERSION = 1

_DTYPES = {"f64": "<f8", "i64": "<i8"}


def _dtype_tag(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return "i64"
    return "f64"


def write_blob(path, a) -> dict:
    a = np.asarray(a)
    tag = _dtype_tag(a)
    data = np.asarray(a, dtype=_DTYPES[tag])
    shape = list(data.shape) if data.ndim else [1]
    Path(path).write_bytes(data.ravel(order="F").tobytes())
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    return {"file": Path(path).name, "rows": rows, "cols": cols, "shape": shape,
            "order": "col-major", "dtype": tag}


def read_blob(path, entry) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing array file {path}")
    if entry.get("order", "col-major") != "col-major":
        raise ValueError(f"unsupported storage order {entry['order']!r}")
    flat = np.frombuffer(path.read_bytes(), dtype=_DTYPES[entry["dtype"]])
    shape = entry.get("shape") or [entry["rows"], entry["cols"]]
    return np.array(flat.reshape(shape, order="F"))


def save_arrays(directory, arrays: dict, meta: dict | None = None) -> Path:
    """Write every array plus ``manifest.json``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    catalog = {}
    for name in sorted(arrays):
        catalog[name] = write_blob(d / f"{name}.bin", arrays[name])
    manifest = {"schema_version": SCHEMA_VERSION, "arrays": catalog}
    if meta:
        manifest.update(meta)
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"no manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_arrays(directory, names=None):
    """Return ``(arrays, manifest)``; ``names`` restricts what is read."""
    d = Path(directory)
    manifest = load_manifest(d)
    catalog = manifest["arrays"]
    wanted = catalog.keys() if names is None else names
    out = {}
    for name in wanted:
        if name not in catalog:
            raise MissingArtifactError(f"array {name!r} not listed in {d / 'manifest.json'}")
        out[name] = read_blob(d / catalog[name]["file"], catalog[name])
    return out, manifest


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def export_matrix_csv(path, header, matrix):
    write_csv(path, header, np.atleast_2d(matrix).tolist())


def file_digest(directory):
    """Mapping filename -> bytes for byte-identity comparisons."""
    d = Path(directory)
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}
