"""File formats: volumes, designs, run configs, array bundles and maps.

Bulk data is raw little-endian binary next to a JSON header. Every write
goes through a temporary file and an atomic rename, and nothing embeds
timestamps, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from .lattice import LatticeGraph, build_lattice


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


class ConfigError(ValueError):
    """Run configuration failed validation."""


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _base(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


# --------------------------------------------------------------------------
# mask run-length encoding


def rle_encode(mask) -> str:
    """Runs over the flattened (C-order) mask, e.g. ``"3x0,13x1"``."""
    flat = np.asarray(mask, dtype=bool).ravel().astype(np.int8)
    if flat.size == 0:
        return ""
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.r_[0, edges]
    lengths = np.diff(np.r_[starts, flat.size])
    return ",".join(f"{n}x{flat[s]}" for s, n in zip(starts, lengths))


def rle_decode(text: str, dims) -> np.ndarray:
    out = []
    for run in filter(None, text.split(",")):
        try:
            count, val = run.split("x")
            count, val = int(count), int(val)
        except ValueError as exc:
            raise FormatError(f"bad mask run {run!r}") from exc
        if val not in (0, 1) or count < 0:
            raise FormatError(f"bad mask run {run!r}")
        out.append(np.full(count, bool(val)))
    flat = np.concatenate(out) if out else np.zeros(0, dtype=bool)
    size = int(np.prod(dims))
    if flat.size != size:
        raise FormatError(f"mask runs cover {flat.size} cells, grid has {size}")
    return flat.reshape(dims)


# --------------------------------------------------------------------------
# volumes


def _check_finite(A, what):
    bad = np.argwhere(~np.isfinite(A))
    if bad.size:
        raise FormatError(f"{what}: non-finite value at index {tuple(int(i) for i in bad[0])}")


def write_volume(path, Y, graph: LatticeGraph, units: str = "", seed=None, extra=None):
    """Write ``Y`` (T x N) to ``<path>.bin`` plus a ``<path>.json`` header."""
    Y = np.asarray(Y, dtype="<f8")
    T, N = Y.shape
    if N != graph.n_voxels:
        raise FormatError(f"volume has {N} voxels, mask has {graph.n_voxels}")
    base = _base(path)
    header = {"dims": list(graph.dims), "mask": rle_encode(graph.mask), "T": T, "N": N,
              "units": units, "seed": seed, "payload": base.name + ".bin"}
    if extra:
        header.update(extra)
    _atomic_write(base.with_suffix(".bin"), np.ascontiguousarray(Y).tobytes())
    _atomic_write(base.with_suffix(".json"), _dump_json(header))
    return base.with_suffix(".json")


def read_volume(path):
    """Returns ``(Y, graph, header)``."""
    base = _base(path)
    try:
        header = json.loads(base.with_suffix(".json").read_text())
        payload = (base.parent / header.get("payload", base.name + ".bin")).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read volume {base}: {exc}") from exc
    for key in ("dims", "mask", "T", "N"):
        if key not in header:
            raise FormatError(f"volume header missing {key!r}")
    dims = tuple(header["dims"])
    mask = rle_decode(header["mask"], dims)
    T, N = int(header["T"]), int(header["N"])
    if int(mask.sum()) != N:
        raise FormatError(f"header N={N} but mask has {int(mask.sum())} voxels")
    if len(payload) != 8 * T * N:
        raise FormatError(f"payload has {len(payload)} bytes, expected {8 * T * N}")
    Y = np.frombuffer(payload, dtype="<f8").reshape(T, N).astype(np.float64)
    _check_finite(Y, "volume")
    return Y, build_lattice(dims, mask), header


# --------------------------------------------------------------------------
# design matrices


def write_design(path, X, names=None):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if names is not None:
        w.writerow(names)
    for row in X:
        w.writerow([repr(float(v)) for v in row])
    _atomic_write(path, buf.getvalue().encode())


def read_design(path) -> np.ndarray:
    """CSV design matrix, one row per time point; a header row is optional."""
    try:
        rows = list(csv.reader(Path(path).read_text().splitlines()))
    except OSError as exc:
        raise FormatError(f"cannot read design {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError("design file is empty")
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        rows = rows[1:]
    width = len(rows[0]) if rows else 0
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"design row {i}: {len(r)} columns, expected {width}")
        try:
            out[i] = [float(v) for v in r]
        except ValueError as exc:
            raise FormatError(f"design row {i}: {exc}") from exc
    _check_finite(out, "design")
    return out


# --------------------------------------------------------------------------
# array bundles (chain outputs, ground truth)


def write_bundle(path, arrays: dict, meta: dict):
    base = _base(path)
    index, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype == bool:
            a = a.astype(np.int8)
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        blob = a.tobytes()
        index[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                       "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    _atomic_write(base.with_suffix(".bin"), b"".join(blobs))
    _atomic_write(base.with_suffix(".json"), _dump_json({"meta": meta, "arrays": index,
                                                        "payload": base.name + ".bin"}))
    return base.with_suffix(".json")


def read_bundle(path):
    base = _base(path)
    try:
        header = json.loads(base.with_suffix(".json").read_text())
        payload = (base.parent / header["payload"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read bundle {base}: {exc}") from exc
    arrays = {}
    for name, ent in header["arrays"].items():
        end = ent["offset"] + ent["nbytes"]
        if end > len(payload):
            raise FormatError(f"bundle payload truncated at array {name!r}")
        a = np.frombuffer(payload[ent["offset"]:end], dtype=np.dtype(ent["dtype"]))
        arrays[name] = a.reshape(ent["shape"]).copy()
    return arrays, header["meta"]


# --------------------------------------------------------------------------
# maps


def write_pgm(path, grid: np.ndarray):
    """8-bit portable graymap normalised to the map's own finite range; NaN -> 0."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim == 3:
        g = g.reshape(-1, g.shape[-1])
    finite = np.isfinite(g)
    lo = g[finite].min() if finite.any() else 0.0
    hi = g[finite].max() if finite.any() else 1.0
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.zeros(g.shape, dtype=np.uint8)
    img[finite] = np.clip(np.rint((g[finite] - lo) * scale), 0, 255).astype(np.uint8)
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_maps(prefix, maps: dict, graph: LatticeGraph, pgm: bool = False):
    """Per map: flat float64 binary, CSV (voxel, coordinates, value), optional PGM."""
    prefix = str(prefix)
    written = []
    for name, values in maps.items():
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (graph.n_voxels,):
            raise FormatError(f"map {name!r} has shape {v.shape}, expected ({graph.n_voxels},)")
        _atomic_write(f"{prefix}_{name}.bin", v.astype("<f8").tobytes())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["voxel"] + [f"x{i}" for i in range(len(graph.dims))] + [name])
        for n, (c, val) in enumerate(zip(graph.coords, v)):
            w.writerow([n, *c.tolist(), repr(float(val))])
        _atomic_write(f"{prefix}_{name}.csv", buf.getvalue().encode())
        written += [f"{prefix}_{name}.bin", f"{prefix}_{name}.csv"]
        if pgm:
            write_pgm(f"{prefix}_{name}.pgm", graph.to_grid(v))
            written.append(f"{prefix}_{name}.pgm")
    return written


def read_map_csv(path) -> np.ndarray:
    rows = list(csv.reader(Path(path).read_text().splitlines()))[1:]
    return np.array([float(r[-1]) for r in rows])


def write_table_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _atomic_write(path, buf.getvalue().encode())


# --------------------------------------------------------------------------
# run configuration

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 0}
_num_or_list = {"oneOf": [_num, {"type": "array", "items": _num}]}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "design": {"type": "string"},
        "out": {"type": "string"},
        "mode": {"enum": ["svaro", "fixed_order"]},
        "P": _int,
        "P0": _int,
        "contrast": {"type": "array", "items": _num, "minItems": 1},
        "delta_e": _num,
        "delta_p": {"type": "number", "exclusiveMinimum": 0.5, "exclusiveMaximum": 1},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "beta0": _num_or_list, "beta1": _num_or_list,
                "q1": _pos, "q2": _pos, "u1": _pos, "u2": _pos, "r1": _pos, "r2": _pos,
                "epsilon": {"type": "number", "exclusiveMinimum": 1},
                "w_ridge": {"type": "number", "minimum": 0},
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_burnin": _int, "n_samples": _int,
                "thin": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "sw_period": {"type": "integer", "minimum": 1},
                "gamma_scan": {"enum": ["checkerboard", "raster", "random"]},
                "neighbor_rule": {"enum": ["ising", "count"]},
                "store_draws": {"type": "boolean"},
                "store_loglik": {"type": "boolean"},
                "n_threads": {"type": "integer", "minimum": 1},
                "chunk_size": {"type": "integer", "minimum": 1},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"pi": _pos, "r2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                           "high_orders": {"type": "array", "items": {"type": "integer"}}},
        },
        "sim": {"type": "object"},
    },
}


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    return cfg


def read_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(cfg)
