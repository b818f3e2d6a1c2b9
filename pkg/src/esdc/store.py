"""Persistent chunked storage in a small, byte-specified subset of Zarr v2.

Layout of a cube rooted at ``root``::

    root/.zgroup                  {"zarr_format":2}
    root/.zattrs                  cube attributes + dimension/variable order
    root/<dim>/.zarray, .zattrs, 0      one coordinate array per dimension
    root/<var>/.zarray, .zattrs, i.j.k  one data array per variable

Data are little-endian float64 in C order.  Every chunk file holds a full
chunk (edge chunks padded with NaN), optionally zlib level-1 compressed.
Metadata JSON uses sorted keys and compact separators so that writing the
same cube twice gives identical bytes.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import shutil
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptChunk, IoFailure, MissingMetadata, UnsupportedDtype, ValidationError
from .model import AttributeSet, CubeSchema, DataCube, DimKind, Grid, check_window, chunk_keys_for_window

logger = logging.getLogger(__name__)

COMPRESSIONS = ("none", "zlib")
_RESERVED_PREFIXES = ("_ARRAY_", "_ESDC_")


def dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _zarray(shape, chunks, compression):
    if compression not in COMPRESSIONS:
        raise ValidationError(f"unknown compression {compression!r}; choose from {COMPRESSIONS}")
    return {
        "chunks": list(chunks),
        "compressor": {"id": "zlib", "level": 1} if compression == "zlib" else None,
        "dtype": "<f8",
        "fill_value": "NaN",
        "filters": None,
        "order": "C",
        "shape": list(shape),
        "zarr_format": 2,
    }


def chunk_name(key: Sequence[int]) -> str:
    return ".".join(str(int(k)) for k in key) if len(key) else "0"


def _write_bytes(path: Path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read().decode("utf-8"))
    except FileNotFoundError:
        raise MissingMetadata(f"missing metadata file {path}") from None
    except (OSError, ValueError) as exc:
        raise MissingMetadata(f"unreadable metadata file {path}: {exc}") from exc


class ZarrArray:
    """Lazy handle on one on-disk array; chunks are decoded on demand.

    ``chunk_reads`` and ``read_log`` record every chunk decode, which lets
    callers verify read-amplification contracts.
    """

    def __init__(self, path, shape, chunks, compressor):
        self.path = Path(path)
        self.shape = tuple(int(s) for s in shape)
        self.chunks = tuple(int(c) for c in chunks)
        self.compression = "zlib" if compressor else "none"
        self._lock = threading.Lock()
        self.chunk_reads = 0
        self.read_log = []

    @classmethod
    def open(cls, path) -> "ZarrArray":
        path = Path(path)
        meta = _read_json(path / ".zarray")
        if meta.get("zarr_format") != 2:
            raise MissingMetadata(f"{path}/.zarray is not zarr_format 2")
        if meta.get("dtype") != "<f8":
            raise UnsupportedDtype(f"{path}: dtype {meta.get('dtype')!r} is not supported (only <f8)")
        if meta.get("order", "C") != "C" or meta.get("filters"):
            raise UnsupportedDtype(f"{path}: only C order without filters is supported")
        comp = meta.get("compressor")
        if comp is not None and comp.get("id") != "zlib":
            raise UnsupportedDtype(f"{path}: compressor {comp.get('id')!r} is not supported")
        return cls(path, meta["shape"], meta["chunks"], comp)

    @property
    def chunk_volume(self) -> int:
        return int(np.prod(self.chunks, dtype=np.int64))

    def chunk_path(self, key) -> Path:
        return self.path / chunk_name(key)

    def _decode(self, key) -> np.ndarray:
        """Full (padded) chunk at ``key``; missing files read as all-NaN."""
        with self._lock:
            self.chunk_reads += 1
            self.read_log.append(tuple(key))
        p = self.chunk_path(key)
        try:
            with open(p, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError:
            return np.full(self.chunks, np.nan)
        except OSError as exc:
            raise IoFailure(f"cannot read {p}: {exc}") from exc
        if self.compression == "zlib":
            try:
                raw = zlib.decompress(raw)
            except zlib.error as exc:
                raise CorruptChunk(f"chunk {p} failed to decompress: {exc}") from exc
        if len(raw) != self.chunk_volume * 8:
            raise CorruptChunk(f"chunk {p} has {len(raw)} bytes, expected {self.chunk_volume * 8}")
        return np.frombuffer(raw, dtype="<f8").reshape(self.chunks).astype(np.float64)

    def _encode(self, key, block: np.ndarray):
        data = np.ascontiguousarray(block, dtype="<f8").tobytes()
        if self.compression == "zlib":
            data = zlib.compress(data, 1)
        _write_bytes(self.chunk_path(key), data)

    def _chunk_box(self, key):
        origin = tuple(k * c for k, c in zip(key, self.chunks))
        extent = tuple(min(c, n - o) for c, n, o in zip(self.chunks, self.shape, origin))
        return origin, extent

    def read_chunk(self, key) -> np.ndarray:
        origin, extent = self._chunk_box(key)
        return self._decode(key)[tuple(slice(0, e) for e in extent)].copy()

    def read(self, origin, shape) -> np.ndarray:
        origin, shape = tuple(origin), tuple(shape)
        check_window(self.shape, origin, shape)
        out = np.empty(shape)
        for key in chunk_keys_for_window(origin, shape, self.chunks):
            corig, _ = self._chunk_box(key)
            lo = [max(o, c) for o, c in zip(origin, corig)]
            hi = [min(o + s, c + ch) for o, s, c, ch in zip(origin, shape, corig, self.chunks)]
            src = tuple(slice(a - c, b - c) for a, b, c in zip(lo, hi, corig))
            dst = tuple(slice(a - o, b - o) for a, b, o in zip(lo, hi, origin))
            out[dst] = self._decode(key)[src]
        return out

    def materialize(self) -> np.ndarray:
        return self.read((0,) * len(self.shape), self.shape)

    def write(self, origin, values):
        """Write ``values`` at ``origin``; partially covered chunks are read-modify-written."""
        values = np.asarray(values, dtype=np.float64)
        origin, shape = tuple(origin), values.shape
        check_window(self.shape, origin, shape)
        for key in chunk_keys_for_window(origin, shape, self.chunks):
            corig, extent = self._chunk_box(key)
            lo = [max(o, c) for o, c in zip(origin, corig)]
            hi = [min(o + s, c + e) for o, s, c, e in zip(origin, shape, corig, extent)]
            covers = all(a == c and b == c + e for a, b, c, e in zip(lo, hi, corig, extent))
            block = np.full(self.chunks, np.nan) if covers else self._decode(key).copy()
            dst = tuple(slice(a - c, b - c) for a, b, c in zip(lo, hi, corig))
            src = tuple(slice(a - o, b - o) for a, b, o in zip(lo, hi, origin))
            block[dst] = values[src]
            self._encode(key, block)

    def reset_counters(self):
        with self._lock:
            self.chunk_reads = 0
            self.read_log = []


def _coord_attrs(grid: Grid, extra) -> dict:
    attrs = {k: v for k, v in extra.items()}
    attrs["_ARRAY_DIMENSIONS"] = [grid.name]
    attrs["_ESDC_KIND"] = grid.kind.value
    attrs["_ESDC_REGULAR"] = bool(grid.regular)
    if grid.units:
        attrs["units"] = grid.units
    if grid.crs:
        attrs["crs"] = grid.crs
    if grid.kind == DimKind.CATEGORICAL:
        attrs["_ESDC_LABELS"] = [str(c) for c in grid.coordinates]
    if grid.kind == DimKind.TEMPORAL:
        attrs.setdefault("calendar", "proleptic_gregorian")
    return attrs


def _coord_values(grid: Grid) -> np.ndarray:
    if grid.kind == DimKind.CATEGORICAL:
        return np.arange(len(grid), dtype=np.float64)
    return grid.coordinates.astype(np.float64)


def write_cube(
    cube: DataCube,
    root,
    compression: str = "none",
    overwrite: bool = False,
    workers: int = 1,
) -> Path:
    """Persist ``cube`` under ``root`` and return the path.

    An existing directory is only replaced with ``overwrite=True`` and only
    if it looks like a cube store (has ``.zgroup``).
    """
    root = Path(root)
    if compression not in COMPRESSIONS:
        raise ValidationError(f"unknown compression {compression!r}; choose from {COMPRESSIONS}")
    names = set(cube.dims)
    for v in cube.variables:
        if v in names:
            raise ValidationError(f"variable {v!r} has the same name as a dimension")
        if not v or "/" in v or v.startswith("."):
            raise ValidationError(f"variable name {v!r} is not a valid array name")
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise IoFailure(f"{root} exists and is not empty")
        if not (root / ".zgroup").exists():
            raise IoFailure(f"refusing to overwrite {root}: not a cube store")
        shutil.rmtree(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}") from exc

    _write_bytes(root / ".zgroup", dumps({"zarr_format": 2}))
    top = dict(cube.attrs.cube)
    top["_ESDC_DIMENSIONS"] = list(cube.dims)
    top["_ESDC_VARIABLES"] = list(cube.variables)
    _write_bytes(root / ".zattrs", dumps(top))

    for g in cube.schema.grids:
        d = root / g.name
        d.mkdir(exist_ok=True)
        _write_bytes(d / ".zarray", dumps(_zarray([len(g)], [len(g)], compression)))
        _write_bytes(d / ".zattrs", dumps(_coord_attrs(g, cube.attrs.dims.get(g.name, {}))))
        ZarrArray(d, [len(g)], [len(g)], compression == "zlib")._encode((0,), _coord_values(g))

    chunks = cube.schema.chunk_shape
    jobs = []
    for v in cube.variables:
        d = root / v
        d.mkdir(exist_ok=True)
        _write_bytes(d / ".zarray", dumps(_zarray(cube.shape, chunks, compression)))
        attrs = dict(cube.attrs.variables.get(v, {}))
        attrs["_ARRAY_DIMENSIONS"] = list(cube.dims)
        _write_bytes(d / ".zattrs", dumps(attrs))
        arr = ZarrArray(d, cube.shape, chunks, compression == "zlib")
        for key in itertools.product(*[range(n) for n in cube.schema.chunk_grid()]):
            jobs.append((v, arr, key))

    def write_one(job):
        v, arr, key = job
        origin, extent = arr._chunk_box(key)
        block = np.full(arr.chunks, np.nan)
        block[tuple(slice(0, e) for e in extent)] = cube.read_window(v, origin, extent)
        arr._encode(key, block)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(write_one, jobs))
    else:
        for job in jobs:
            write_one(job)
    logger.debug("wrote %s (%d chunk files)", root, len(jobs))
    return root


def open_cube(root) -> DataCube:
    """Open a cube lazily; variable chunks are only decoded when read."""
    root = Path(root)
    if not (root / ".zgroup").exists():
        raise MissingMetadata(f"{root} has no .zgroup")
    top = _read_json(root / ".zattrs")
    try:
        dims = top.pop("_ESDC_DIMENSIONS")
        variables = top.pop("_ESDC_VARIABLES")
    except KeyError as exc:
        raise MissingMetadata(f"{root}/.zattrs lacks {exc}") from None

    grids, dim_attrs = [], {}
    for name in dims:
        arr = ZarrArray.open(root / name)
        attrs = _read_json(root / name / ".zattrs")
        values = arr.materialize()
        kind = DimKind(attrs.get("_ESDC_KIND", "other"))
        if kind == DimKind.CATEGORICAL:
            coords = np.array(attrs["_ESDC_LABELS"])
        elif kind == DimKind.TEMPORAL:
            coords = values.astype(np.int64)
        else:
            coords = values
        grids.append(Grid(name, coords, kind, attrs.get("units", ""), bool(attrs.get("_ESDC_REGULAR")),
                          attrs.get("crs")))
        skip = {"units", "crs"}
        kept = {
            k: v for k, v in attrs.items() if not k.startswith(_RESERVED_PREFIXES) and k not in skip
            and not (kind == DimKind.TEMPORAL and k == "calendar")
        }
        if kept:
            dim_attrs[name] = kept

    arrays, var_attrs, chunk_shape = {}, {}, None
    for v in variables:
        arr = ZarrArray.open(root / v)
        attrs = _read_json(root / v / ".zattrs")
        if attrs.get("_ARRAY_DIMENSIONS") != list(dims):
            raise MissingMetadata(f"{root}/{v}: _ARRAY_DIMENSIONS does not match the cube dimensions")
        if chunk_shape is None:
            chunk_shape = arr.chunks
        elif arr.chunks != chunk_shape:
            raise UnsupportedDtype(f"{root}/{v}: chunking differs between variables")
        arrays[v] = arr
        var_attrs[v] = {k: val for k, val in attrs.items() if not k.startswith(_RESERVED_PREFIXES)}
    schema = CubeSchema(tuple(grids), tuple(variables), tuple(chunk_shape or ()))
    return DataCube(schema, AttributeSet(top, dim_attrs, var_attrs), arrays)


def read_window(cube: DataCube, origin, shape, variable: Optional[str] = None) -> np.ndarray:
    """Dense window of one variable, or of all variables stacked first."""
    if variable is not None:
        return cube.read_window(variable, origin, shape)
    return np.stack([cube.read_window(v, origin, shape) for v in cube.variables])


def write_window(cube: DataCube, origin, values, variable: Optional[str] = None) -> None:
    """Write into a store-backed cube in place (only the touched chunks change)."""
    variable = cube.variables[0] if variable is None else variable
    arr = cube.array(variable)
    if not isinstance(arr, ZarrArray):
        raise IoFailure("write_window needs a cube opened from a store")
    arr.write(origin, values)


def chunk_files(root) -> dict:
    """Map ``relative path -> bytes`` for every file of a store (for comparisons)."""
    root = Path(root)
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = p.read_bytes()
    return out
