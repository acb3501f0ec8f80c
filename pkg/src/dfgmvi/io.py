"""Artifact readers and writers.

CSV files are RFC 4180 (``csv`` module, ``\\r\\n`` line endings, UTF-8) with
floats written by ``repr`` so values round-trip exactly.  JSON artifacts are
validated against small schemas after writing.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from .metrics import GridDensity
from .mixture import GaussianMixture

__all__ = ["write_mixture", "read_mixture", "write_grid_csv", "read_grid_csv",
           "write_field", "read_field", "write_csv", "read_csv", "write_json",
           "MIXTURE_SCHEMA", "REPORT_SCHEMA", "FIELD_HEADER_SCHEMA", "format_float"]

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}
_MAT = {"type": "array", "items": _VEC}

MIXTURE_SCHEMA = {
    "type": "object",
    "required": ["iteration", "weights", "means", "cov_chols"],
    "properties": {
        "iteration": {"type": "integer", "minimum": 0},
        "weights": _VEC,
        "means": _MAT,
        "cov_chols": {"type": "array", "items": _MAT},
    },
}

FIELD_HEADER_SCHEMA = {
    "type": "object",
    "required": ["shape", "dtype", "order", "file"],
    "properties": {
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "dtype": {"const": "<f8"},
        "order": {"const": "C"},
        "file": {"type": "string"},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "problem", "runs"],
    "properties": {
        "version": {"type": "integer"},
        "problem": {"type": "string"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["method", "seed", "status", "final_tv", "f_evals"],
                "properties": {
                    "method": {"type": "string"},
                    "seed": {"type": "integer"},
                    "status": {"type": "string"},
                    "final_tv": {"type": ["number", "null"]},
                    "f_evals": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def format_float(x) -> str:
    """Shortest round-trip representation; empty string for ``None``/NaN."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def write_json(path, obj, schema=None):
    path = Path(path)
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    if schema is not None:
        jsonschema.validate(json.loads(path.read_text(encoding="utf-8")), schema)
    return path


def write_mixture(path, mix: GaussianMixture, iteration: int = 0):
    d = mix.to_json_dict()
    d["iteration"] = int(iteration)
    return write_json(path, d, MIXTURE_SCHEMA)


def read_mixture(path) -> tuple[GaussianMixture, int]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    jsonschema.validate(d, MIXTURE_SCHEMA)
    return GaussianMixture.from_json_dict(d), int(d["iteration"])


def write_csv(path, header, rows):
    """Write rows of numbers/strings; floats via :func:`format_float`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int, np.integer)) and not isinstance(v, bool)
                        else format_float(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_grid_csv(path, density: GridDensity):
    """Columns ``x[,y],value`` in ``ij`` order."""
    names = ["x", "y"][:density.ndim]
    pts = density.points()
    vals = density.values.ravel()
    return write_csv(path, names + ["value"],
                     (list(p) + [v] for p, v in zip(pts, vals)))


def read_grid_csv(path) -> GridDensity:
    header, rows = read_csv(path)
    data = np.array([[float(v) for v in r] for r in rows])
    d = len(header) - 1
    axes = tuple(np.unique(data[:, i]) for i in range(d))
    return GridDensity(axes, data[:, -1].reshape(tuple(a.size for a in axes)))


def write_field(stem, array, **meta):
    """Flat little-endian float64 row-major binary plus a JSON header.

    Writes ``stem.bin`` and ``stem.json``; extra keyword arguments land in
    the header under ``meta``.
    """
    stem = Path(stem)
    a = np.ascontiguousarray(array, dtype="<f8")
    bin_path = stem.with_suffix(".bin")
    a.tofile(bin_path)
    header = {"shape": list(a.shape), "dtype": "<f8", "order": "C", "file": bin_path.name,
              "meta": meta}
    write_json(stem.with_suffix(".json"), header, FIELD_HEADER_SCHEMA)
    return bin_path


def read_field(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    jsonschema.validate(header, FIELD_HEADER_SCHEMA)
    data = np.fromfile(stem.parent / header["file"], dtype="<f8")
    return data.reshape(header["shape"]), header.get("meta", {})
