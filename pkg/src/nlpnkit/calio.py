"""Calibration artifact files.

One artifact per file, binary, little-endian, versioned by a magic string:

    magic  8 bytes  b"NLPNCAL1"
    kind   1 byte   1 = moment sums (1D or 2D grid)
                    2 = moment-sum pair (both polarizations, shared 2D grid)
                    3 = joint phase/amplitude histogram
    hlen   4 bytes  u32, JSON header length
    header hlen bytes, UTF-8 JSON: array manifest (name, dtype, shape),
           grid/order scalars, and caller metadata
    arrays raw bytes, concatenated in manifest order

Writers emit byte-identical files for identical inputs (sorted JSON keys,
no timestamps), which the reproducibility contract of the CLI relies on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .stats import AmplitudeGrid, ConditionalCF, Density4D

__all__ = [
    "save_cf",
    "save_cf_pair",
    "save_density",
    "load_calibration",
    "CalibrationFormatError",
]

MAGIC = b"NLPNCAL1"
KIND_CF = 1
KIND_CF_PAIR = 2
KIND_DENSITY = 3

_DTYPES = {"<f8": np.dtype("<f8"), "<c16": np.dtype("<c16"), "<i8": np.dtype("<i8")}


class CalibrationFormatError(ValueError):
    """Raised for files that are not valid calibration artifacts."""


def _write(path, kind: int, scalars: dict, arrays: dict, meta: dict) -> None:
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = {"float64": "<f8", "complex128": "<c16", "int64": "<i8"}[arr.dtype.name]
        arr = arr.astype(_DTYPES[code], copy=False)
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"scalars": scalars, "arrays": manifest, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", kind, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:8] != MAGIC:
        raise CalibrationFormatError(f"{path}: not a calibration artifact (bad magic)")
    kind, hlen = struct.unpack_from("<BI", data, 8)
    pos = 13
    if pos + hlen > len(data):
        raise CalibrationFormatError(f"{path}: truncated header")
    header = json.loads(data[pos:pos + hlen].decode())
    pos += hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = _DTYPES[spec["dtype"]]
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise CalibrationFormatError(f"{path}: truncated payload at {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(
            data, dtype=dt, count=count, offset=pos
        ).reshape(spec["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise CalibrationFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return kind, header, arrays


def _grid_arrays(grid: AmplitudeGrid) -> dict:
    out = {"edges_x": grid.edges_x}
    if grid.edges_y is not None:
        out["edges_y"] = grid.edges_y
    return out


def _grid_from(arrays: dict) -> AmplitudeGrid:
    return AmplitudeGrid(arrays["edges_x"], arrays.get("edges_y"))


def save_cf(path, cf: ConditionalCF, meta: dict | None = None) -> None:
    """Write one polarization's binned moment sums."""
    arrays = dict(_grid_arrays(cf.grid), counts=cf.counts, sums=cf.sums)
    _write(path, KIND_CF, {"k_max": cf.k_max}, arrays, meta)


def save_cf_pair(path, cf_x: ConditionalCF, cf_y: ConditionalCF,
                 meta: dict | None = None) -> None:
    """Write both polarizations' moment sums over one shared grid."""
    if cf_x.k_max != cf_y.k_max or cf_x.grid.shape != cf_y.grid.shape:
        raise ValueError("polarizations must share grid and order")
    arrays = dict(
        _grid_arrays(cf_x.grid),
        counts_x=cf_x.counts, sums_x=cf_x.sums,
        counts_y=cf_y.counts, sums_y=cf_y.sums,
    )
    _write(path, KIND_CF_PAIR, {"k_max": cf_x.k_max}, arrays, meta)


def save_density(path, d: Density4D, meta: dict | None = None) -> None:
    """Write the joint phase/amplitude histogram."""
    arrays = dict(_grid_arrays(d.amp_grid), counts=d.counts)
    _write(path, KIND_DENSITY, {"n_phase": d.n_phase, "n": d.n}, arrays, meta)


def load_calibration(path):
    """Read any artifact file.

    Returns
    -------
    (kind, payload, meta) : tuple
        kind is 'cf', 'cf_pair', or 'density'; payload is the matching
        object (ConditionalCF, (cf_x, cf_y), or Density4D).
    """
    kind, header, arrays = _read(path)
    scalars = header["scalars"]
    meta = header.get("meta", {})
    grid = _grid_from(arrays)
    if kind == KIND_CF:
        cf = ConditionalCF(grid=grid, k_max=int(scalars["k_max"]),
                           sums=arrays["sums"], counts=arrays["counts"])
        return "cf", cf, meta
    if kind == KIND_CF_PAIR:
        cf_x = ConditionalCF(grid=grid, k_max=int(scalars["k_max"]),
                             sums=arrays["sums_x"], counts=arrays["counts_x"])
        cf_y = ConditionalCF(grid=grid, k_max=int(scalars["k_max"]),
                             sums=arrays["sums_y"], counts=arrays["counts_y"])
        return "cf_pair", (cf_x, cf_y), meta
    if kind == KIND_DENSITY:
        d = Density4D(n_phase=int(scalars["n_phase"]), amp_grid=grid,
                      counts=arrays["counts"], n=int(scalars["n"]))
        return "density", d, meta
    raise CalibrationFormatError(f"{path}: unknown artifact kind {kind}")
