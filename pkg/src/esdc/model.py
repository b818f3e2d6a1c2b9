"""Core data model: dimensions, grids, schemas, attributes, provenance, cubes.

A :class:`DataCube` is an immutable value made of a :class:`CubeSchema`
(ordered grids, variable names, chunk shape), an :class:`AttributeSet` and
one array backend per variable.  Backends expose windowed reads so that a
cube can live in memory (:class:`MemoryArray`) or lazily on disk (see
:mod:`esdc.store`).

Dimension order is canonicalised on construction to
``(time, y, x, extra...)``; the variable axis always comes first in dense
arrays returned by :meth:`DataCube.to_numpy`.
"""

from __future__ import annotations

import datetime as _dt
import itertools
import json
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    EmptySelection,
    IrregularSpacingDeclaredRegular,
    MalformedRecord,
    NonMonotonic,
    TooFewCoordinates,
    UnknownDimension,
    ValidationError,
)

EPOCH = np.datetime64("1970-01-01", "D")
REGULAR_RTOL = 1e-9

_Y_NAMES = ("lat", "latitude", "y")
_X_NAMES = ("lon", "longitude", "x")
_T_NAMES = ("time", "t", "date")


class DimKind(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    VARIABLE = "variable"
    CATEGORICAL = "categorical"
    OTHER = "other"


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: DimKind = DimKind.OTHER

    def __post_init__(self):
        if not self.name:
            raise ValidationError("dimension name must be non-empty")


# ---------------------------------------------------------------------------
# time helpers


def to_days(value) -> int:
    """Convert a date-like value (ISO string, date, datetime64, int) to epoch days."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (_dt.date, _dt.datetime)):
        value = value.isoformat()[:10]
    return int((np.datetime64(value, "D") - EPOCH).astype(np.int64))


def from_days(days) -> np.ndarray:
    return EPOCH + np.asarray(days, dtype=np.int64).astype("timedelta64[D]")


def iso_date(days: int) -> str:
    return str(from_days(int(days)))


def day_of_year_366(days) -> np.ndarray:
    """Map epoch days to a 1..366 day-of-year on the leap-year calendar.

    Feb 29 is slot 60 and every date from Mar 1 onwards takes the slot it
    has in a leap year, so a given calendar day always lands in the same slot.
    """
    d = from_days(days)
    years = d.astype("datetime64[Y]")
    doy = (d - years.astype("datetime64[D]")).astype(np.int64) + 1
    y = years.astype(np.int64) + 1970
    leap = ((y % 4 == 0) & (y % 100 != 0)) | (y % 400 == 0)
    return np.where(~leap & (doy >= 60), doy + 1, doy)


# ---------------------------------------------------------------------------
# grids


def _infer_kind(name: str, coords: np.ndarray) -> DimKind:
    lname = name.lower()
    if coords.dtype.kind in "USO":
        return DimKind.CATEGORICAL
    if lname in _T_NAMES:
        return DimKind.TEMPORAL
    if lname in _Y_NAMES or lname in _X_NAMES:
        return DimKind.SPATIAL
    return DimKind.OTHER


def _spacing_regular(coords: np.ndarray) -> bool:
    if coords.size < 2:
        return False
    d = np.diff(coords.astype(np.float64))
    return bool(np.all(np.abs(d - d[0]) <= REGULAR_RTOL * abs(d[0])))


@dataclass(frozen=True, eq=False)
class Grid:
    """Coordinates along one dimension.

    ``coordinates`` are float64 for spatial/other axes, int64 epoch days for
    temporal axes and unicode strings for categorical axes.  ``regular`` is
    inferred from the spacing when not given.
    """

    name: str
    coordinates: np.ndarray
    kind: Optional[DimKind] = None
    units: str = ""
    regular: Optional[bool] = None
    crs: Optional[str] = None

    def __post_init__(self):
        raw = np.asarray(self.coordinates)
        kind = DimKind(self.kind) if self.kind is not None else _infer_kind(self.name, raw)
        if kind == DimKind.CATEGORICAL:
            coords = raw.astype(str)
        elif kind == DimKind.TEMPORAL:
            if raw.dtype.kind in "USOM":
                coords = np.array([to_days(v) for v in raw.ravel()], dtype=np.int64)
            else:
                coords = raw.astype(np.int64)
        else:
            coords = raw.astype(np.float64)
        coords = np.array(coords, copy=True).reshape(-1)
        coords.setflags(write=False)
        object.__setattr__(self, "coordinates", coords)
        object.__setattr__(self, "kind", kind)
        if self.regular is None:
            regular = kind != DimKind.CATEGORICAL and _spacing_regular(coords)
            object.__setattr__(self, "regular", regular)
        if kind == DimKind.SPATIAL and self.crs is None:
            object.__setattr__(self, "crs", "EPSG:4326")
        if kind == DimKind.TEMPORAL and not self.units:
            object.__setattr__(self, "units", "days since 1970-01-01")

    @classmethod
    def regular_range(cls, name, start, step, n, **kw) -> "Grid":
        coords = start + step * np.arange(n, dtype=np.float64)
        return cls(name, coords, regular=True, **kw)

    @property
    def dimension(self) -> Dimension:
        return Dimension(self.name, self.kind)

    @property
    def step(self) -> float:
        c = self.coordinates
        return float(c[1] - c[0]) if c.size >= 2 else float("nan")

    @property
    def is_numeric(self) -> bool:
        return self.kind != DimKind.CATEGORICAL

    def __len__(self):
        return int(self.coordinates.size)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.units == other.units
            and bool(self.regular) == bool(other.regular)
            and self.crs == other.crs
            and self.coordinates.dtype.kind == other.coordinates.dtype.kind
            and np.array_equal(self.coordinates, other.coordinates)
        )

    __hash__ = None

    def same_coordinates(self, other: "Grid") -> bool:
        return len(self) == len(other) and np.array_equal(self.coordinates, other.coordinates)

    def edges(self) -> np.ndarray:
        """Cell edges (length n+1) from the midpoints between centers."""
        c = self.coordinates.astype(np.float64)
        mid = 0.5 * (c[1:] + c[:-1])
        first = c[0] - (mid[0] - c[0])
        last = c[-1] + (c[-1] - mid[-1])
        return np.concatenate([[first], mid, [last]])

    def with_coordinates(self, coords, regular=None) -> "Grid":
        return Grid(self.name, coords, self.kind, self.units, regular, self.crs)

    def describe(self) -> str:
        c = self.coordinates
        if self.kind == DimKind.TEMPORAL:
            lo, hi = iso_date(c[0]), iso_date(c[-1])
        elif self.kind == DimKind.CATEGORICAL:
            lo, hi = c[0], c[-1]
        else:
            lo, hi = f"{c[0]:g}", f"{c[-1]:g}"
        reg = f"regular step {self.step:g}" if self.regular else "irregular"
        return f"{self.name} ({self.kind.value}): {len(self)} coords [{lo} .. {hi}], {reg}"


def lat_grid(resolution: float) -> Grid:
    """Global regular latitude grid of cell centers, south to north."""
    n = int(round(180.0 / resolution))
    return Grid.regular_range("lat", -90.0 + resolution / 2, resolution, n, units="degrees_north")


def lon_grid(resolution: float) -> Grid:
    n = int(round(360.0 / resolution))
    return Grid.regular_range("lon", -180.0 + resolution / 2, resolution, n, units="degrees_east")


def time_grid(start, n: int, step_days: int = 1) -> Grid:
    t0 = to_days(start)
    return Grid("time", t0 + step_days * np.arange(n, dtype=np.int64), DimKind.TEMPORAL)


def validate_grid(grid: Grid) -> None:
    """Raise the error for the first violated grid invariant, else return None."""
    c = grid.coordinates
    if c.size < 2:
        raise TooFewCoordinates(f"grid {grid.name!r} has {c.size} coordinate(s); at least 2 required")
    if grid.kind == DimKind.CATEGORICAL:
        if grid.regular:
            raise IrregularSpacingDeclaredRegular(f"categorical grid {grid.name!r} cannot be regular")
        return None
    d = np.diff(c.astype(np.float64))
    if not (np.all(d > 0) or np.all(d < 0)):
        raise NonMonotonic(f"grid {grid.name!r} is not strictly monotonic")
    if grid.regular and not _spacing_regular(c):
        raise IrregularSpacingDeclaredRegular(f"grid {grid.name!r} declared regular but spacing varies")
    return None


def canonical_order(grids: Sequence[Grid]) -> Tuple[int, ...]:
    """Permutation putting grids in (time, y, x, extra...) order."""

    def rank(item):
        i, g = item
        lname = g.name.lower()
        if g.kind == DimKind.TEMPORAL:
            return (0, i)
        if g.kind == DimKind.SPATIAL and lname in _Y_NAMES:
            return (1, i)
        if g.kind == DimKind.SPATIAL and lname in _X_NAMES:
            return (2, i)
        return (3, i)

    return tuple(i for i, _ in sorted(enumerate(grids), key=rank))


# ---------------------------------------------------------------------------
# schema and attributes


@dataclass(frozen=True, eq=False)
class CubeSchema:
    grids: Tuple[Grid, ...]
    variables: Tuple[str, ...]
    chunk_shape: Tuple[int, ...]
    fill_sentinel: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(self.grids))
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "chunk_shape", tuple(int(c) for c in self.chunk_shape))
        names = [g.name for g in self.grids]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate dimension names in {names}")
        if not self.variables:
            raise ValidationError("a cube needs at least one variable")
        if len(set(self.variables)) != len(self.variables):
            raise ValidationError(f"duplicate variable names in {list(self.variables)}")
        if len(self.chunk_shape) != len(self.grids):
            raise ValidationError("chunk_shape must have one entry per dimension")
        for g, c in zip(self.grids, self.chunk_shape):
            validate_grid(g)
            if not 1 <= c <= len(g):
                raise ValidationError(f"chunk extent {c} for {g.name!r} outside [1, {len(g)}]")

    @property
    def dimensions(self) -> Tuple[Dimension, ...]:
        return tuple(g.dimension for g in self.grids)

    @property
    def dims(self) -> Tuple[str, ...]:
        return tuple(g.name for g in self.grids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(g) for g in self.grids)

    def axis(self, name: str) -> int:
        for i, g in enumerate(self.grids):
            if g.name == name:
                return i
        raise UnknownDimension(f"unknown dimension {name!r}; cube has {list(self.dims)}")

    def grid(self, name: str) -> Grid:
        return self.grids[self.axis(name)]

    def find(self, kind: DimKind, names: Iterable[str] = ()) -> Optional[str]:
        names = tuple(names)
        for g in self.grids:
            if g.kind == kind and (not names or g.name.lower() in names):
                return g.name
        return None

    @property
    def time_dim(self) -> Optional[str]:
        return self.find(DimKind.TEMPORAL)

    @property
    def lat_dim(self) -> Optional[str]:
        return self.find(DimKind.SPATIAL, _Y_NAMES)

    @property
    def lon_dim(self) -> Optional[str]:
        return self.find(DimKind.SPATIAL, _X_NAMES)

    def chunk_grid(self) -> Tuple[int, ...]:
        return tuple(-(-n // c) for n, c in zip(self.shape, self.chunk_shape))

    def equals(self, other: "CubeSchema") -> bool:
        return (
            self.variables == other.variables
            and self.chunk_shape == other.chunk_shape
            and len(self.grids) == len(other.grids)
            and all(a == b for a, b in zip(self.grids, other.grids))
        )


def _str_map(m: Optional[Mapping]) -> Dict[str, str]:
    return {str(k): v if isinstance(v, str) else json.dumps(v) for k, v in (m or {}).items()}


@dataclass(frozen=True)
class AttributeSet:
    """String key/value attributes at cube, dimension and variable scope."""

    cube: Mapping[str, str] = field(default_factory=dict)
    dims: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    variables: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "cube", _str_map(self.cube))
        object.__setattr__(self, "dims", {k: _str_map(v) for k, v in self.dims.items()})
        object.__setattr__(self, "variables", {k: _str_map(v) for k, v in self.variables.items()})

    @property
    def history(self) -> str:
        return self.cube.get("history", "")

    def history_lines(self):
        h = self.history
        return h.split("\n") if h else []

    def with_history_line(self, line: str) -> "AttributeSet":
        h = self.history
        cube = dict(self.cube)
        cube["history"] = f"{h}\n{line}" if h else line
        return replace(self, cube=cube)

    def variable(self, name: str) -> Dict[str, str]:
        return dict(self.variables.get(name, {}))

    def update_variable(self, name: str, **entries) -> "AttributeSet":
        v = {k: dict(a) for k, a in self.variables.items()}
        v.setdefault(name, {}).update(_str_map(entries))
        return replace(self, variables=v)

    def update_cube(self, **entries) -> "AttributeSet":
        cube = dict(self.cube)
        cube.update(_str_map(entries))
        return replace(self, cube=cube)

    def restrict(self, variables: Iterable[str], dims: Iterable[str]) -> "AttributeSet":
        variables, dims = set(variables), set(dims)
        return AttributeSet(
            self.cube,
            {k: v for k, v in self.dims.items() if k in dims},
            {k: v for k, v in self.variables.items() if k in variables},
        )

    def without_history(self) -> "AttributeSet":
        cube = {k: v for k, v in self.cube.items() if k != "history"}
        return replace(self, cube=cube)


# ---------------------------------------------------------------------------
# provenance

_fixed_time: Optional[str] = None


def set_fixed_time(iso: Optional[str]) -> None:
    """Freeze (or with ``None`` unfreeze) provenance timestamps."""
    global _fixed_time
    _fixed_time = iso


def now_iso() -> str:
    if _fixed_time is not None:
        return _fixed_time
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, (tuple, set)):
        return list(v)
    if isinstance(v, slice):
        return {"slice": [v.start, v.stop]}
    raise TypeError(f"cannot serialise {type(v).__name__} in provenance parameters")


def canonical_params(params: Mapping[str, Any]) -> str:
    return json.dumps(params, sort_keys=True, separators=(",", ":"), default=_jsonable, allow_nan=False)


@dataclass(frozen=True)
class ProvenanceRecord:
    timestamp: str
    operation: str
    parameters: str

    @classmethod
    def now(cls, operation: str, params: Optional[Mapping[str, Any]] = None) -> "ProvenanceRecord":
        return cls(now_iso(), operation, canonical_params(params or {}))

    def serialize(self) -> str:
        return f"{self.timestamp}: {self.operation} {self.parameters}"

    @classmethod
    def parse(cls, line: str) -> "ProvenanceRecord":
        ts, sep, rest = line.partition(": ")
        op, _, params = rest.partition(" ")
        if not sep or not op:
            raise MalformedRecord(f"cannot parse history line {line!r}")
        return cls(ts, op, params)

    @property
    def params(self) -> Dict[str, Any]:
        return json.loads(self.parameters) if self.parameters else {}


# ---------------------------------------------------------------------------
# array backends


class MemoryArray:
    """In-memory array backend with chunk-read accounting.

    A "chunk read" is counted for every chunk a window touches, mirroring
    what a chunked store would have to decode.
    """

    def __init__(self, data: np.ndarray, chunks: Sequence[int]):
        data = np.array(data, dtype=np.float64, copy=True)
        data.setflags(write=False)
        self.data = data
        self.shape = data.shape
        self.chunks = tuple(int(c) for c in chunks)
        self._lock = threading.Lock()
        self.chunk_reads = 0
        self.read_log = []

    def _touch(self, origin, shape):
        keys = chunk_keys_for_window(origin, shape, self.chunks)
        with self._lock:
            self.chunk_reads += len(keys)
            self.read_log.extend(keys)

    def read(self, origin: Sequence[int], shape: Sequence[int]) -> np.ndarray:
        check_window(self.shape, origin, shape)
        self._touch(origin, shape)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, shape))
        return np.array(self.data[sl], copy=True)

    def read_chunk(self, key: Sequence[int]) -> np.ndarray:
        """Return the (unpadded) chunk at ``key``."""
        origin = [k * c for k, c in zip(key, self.chunks)]
        shape = [min(c, n - o) for c, n, o in zip(self.chunks, self.shape, origin)]
        with self._lock:
            self.chunk_reads += 1
            self.read_log.append(tuple(key))
        sl = tuple(slice(o, o + s) for o, s in zip(origin, shape))
        return np.array(self.data[sl], copy=True)

    def materialize(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def reset_counters(self):
        with self._lock:
            self.chunk_reads = 0
            self.read_log = []


def check_window(array_shape, origin, shape):
    from .errors import OutOfBounds

    if len(origin) != len(array_shape) or len(shape) != len(array_shape):
        raise OutOfBounds(f"window rank mismatch: origin {tuple(origin)}, shape {tuple(shape)}, array {array_shape}")
    for o, s, n in zip(origin, shape, array_shape):
        if o < 0 or s < 0 or o + s > n:
            raise OutOfBounds(f"window origin {tuple(origin)} shape {tuple(shape)} outside array {array_shape}")


def chunk_keys_for_window(origin, shape, chunks):
    """All chunk keys (C order) intersecting a window; empty for empty windows."""
    if any(s == 0 for s in shape):
        return []
    ranges = [range(o // c, (o + s - 1) // c + 1) for o, s, c in zip(origin, shape, chunks)]
    return [tuple(k) for k in itertools.product(*ranges)]


# ---------------------------------------------------------------------------
# cube


class DataCube:
    """Immutable labelled cube: schema + attributes + one backend per variable."""

    def __init__(self, schema: CubeSchema, attrs: Optional[AttributeSet], arrays: Mapping[str, Any]):
        self.schema = schema
        self.attrs = attrs if attrs is not None else AttributeSet()
        self._arrays = dict(arrays)
        for v in schema.variables:
            a = self._arrays.get(v)
            if a is None:
                raise ValidationError(f"missing array for variable {v!r}")
            if tuple(a.shape) != schema.shape:
                raise ValidationError(f"array for {v!r} has shape {tuple(a.shape)}, expected {schema.shape}")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_numpy(
        cls,
        data,
        grids: Sequence[Grid],
        variables: Optional[Sequence[str]] = None,
        chunks: Optional[Sequence[int]] = None,
        attrs: Optional[AttributeSet] = None,
    ) -> "DataCube":
        """Build an in-memory cube.

        ``data`` is either a mapping ``variable -> array`` or an array whose
        first axis indexes ``variables``; the remaining axes follow ``grids``
        in the order given.  Grids are reordered canonically and the data
        transposed to match.
        """
        grids = list(grids)
        if isinstance(data, Mapping):
            variables = list(data) if variables is None else list(variables)
            stack = [np.asarray(data[v], dtype=np.float64) for v in variables]
        else:
            arr = np.asarray(data, dtype=np.float64)
            if variables is None:
                raise ValidationError("variables must be given for array input")
            variables = list(variables)
            if arr.ndim == len(grids) and len(variables) == 1:
                arr = arr[np.newaxis]
            stack = list(arr)
        perm = canonical_order(grids)
        grids = [grids[i] for i in perm]
        stack = [np.transpose(a, perm) if a.ndim == len(perm) else a for a in stack]
        shape = tuple(len(g) for g in grids)
        if chunks is None:
            chunks = shape
        else:
            chunks = [chunks[i] for i in perm]
            chunks = [min(int(c), n) for c, n in zip(chunks, shape)]
        schema = CubeSchema(tuple(grids), tuple(variables), tuple(chunks))
        arrays = {}
        for v, a in zip(variables, stack):
            if a.shape != shape:
                raise ValidationError(f"data for {v!r} has shape {a.shape}, expected {shape}")
            arrays[v] = MemoryArray(a, schema.chunk_shape)
        return cls(schema, attrs, arrays)

    def with_data(self, data: Mapping[str, np.ndarray], grids=None, chunks=None, attrs=None) -> "DataCube":
        """New in-memory cube sharing this cube's attributes unless overridden.

        Arrays must already be in the order of ``grids`` (canonical order is
        still enforced).
        """
        grids = self.schema.grids if grids is None else grids
        if chunks is None:
            old = dict(zip(self.schema.dims, self.schema.chunk_shape))
            chunks = [min(old.get(g.name, len(g)), len(g)) for g in grids]
        attrs = self.attrs if attrs is None else attrs
        attrs = attrs.restrict(data.keys(), [g.name for g in grids])
        return DataCube.from_numpy(dict(data), grids, chunks=chunks, attrs=attrs)

    # -- accessors ---------------------------------------------------------

    @property
    def dims(self) -> Tuple[str, ...]:
        return self.schema.dims

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.schema.shape

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.schema.variables

    @property
    def grids(self) -> Dict[str, Grid]:
        return {g.name: g for g in self.schema.grids}

    def grid(self, name: str) -> Grid:
        return self.schema.grid(name)

    def axis(self, name: str) -> int:
        return self.schema.axis(name)

    def array(self, variable: str):
        try:
            return self._arrays[variable]
        except KeyError:
            raise UnknownDimension(f"unknown variable {variable!r}") from None

    @property
    def order(self) -> int:
        return order(self)

    def values(self, variable: Optional[str] = None) -> np.ndarray:
        """Materialise one variable (default: the only/first variable)."""
        if variable is None:
            variable = self.variables[0]
        a = self.array(variable)
        if hasattr(a, "materialize"):
            return a.materialize()
        return a.read((0,) * len(self.shape), self.shape)

    def to_numpy(self) -> np.ndarray:
        return np.stack([self.values(v) for v in self.variables]) if self.variables else np.empty((0,))

    def read_window(self, variable: str, origin: Sequence[int], shape: Sequence[int]) -> np.ndarray:
        return self.array(variable).read(tuple(origin), tuple(shape))

    def with_attrs(self, attrs: AttributeSet) -> "DataCube":
        return DataCube(self.schema, attrs, self._arrays)

    def equals(self, other: "DataCube", history: bool = True) -> bool:
        """Data (NaN == NaN), grids and attributes equality."""
        if not self.schema.equals(other.schema):
            return False
        a1, a2 = self.attrs, other.attrs
        if not history:
            a1, a2 = a1.without_history(), a2.without_history()
        if a1 != a2:
            return False
        return all(np.array_equal(self.values(v), other.values(v), equal_nan=True) for v in self.variables)

    def __repr__(self):
        dims = ", ".join(f"{g.name}: {len(g)}" for g in self.schema.grids)
        return f"<DataCube order={self.order} dims=({dims}) variables={list(self.variables)}>"


def order(cube: DataCube) -> int:
    """Number of dimensions; the variable axis counts only with >= 2 variables."""
    return len(cube.schema.grids) + (1 if len(cube.variables) >= 2 else 0)


def append_provenance(cube: DataCube, record: ProvenanceRecord) -> DataCube:
    line = record.serialize()
    if "\n" in line or "\r" in line:
        raise MalformedRecord("provenance record must serialise to a single line")
    if not record.operation or " " in record.operation:
        raise MalformedRecord(f"invalid operation name {record.operation!r}")
    return cube.with_attrs(cube.attrs.with_history_line(line))


def stamp(cube: DataCube, operation: str, params: Optional[Mapping[str, Any]] = None) -> DataCube:
    """Append one provenance record for ``operation`` with ``params``."""
    return append_provenance(cube, ProvenanceRecord.now(operation, params))


# ---------------------------------------------------------------------------
# subsetting


def _select_indices(grid: Grid, sel) -> np.ndarray:
    c = grid.coordinates
    n = len(grid)
    if isinstance(sel, slice):
        return np.arange(n)[sel]
    if isinstance(sel, Mapping):
        if "slice" in sel:
            start, stop = sel["slice"]
            return np.arange(n)[slice(start, stop)]
        if "values" in sel:
            sel = list(sel["values"])
    if grid.kind == DimKind.CATEGORICAL:
        wanted = [sel] if isinstance(sel, str) else list(sel)
        return np.array([i for i, v in enumerate(c) if v in set(wanted)], dtype=np.intp)
    if isinstance(sel, (list, tuple)) and len(sel) == 2:
        lo, hi = sel
        if grid.kind == DimKind.TEMPORAL:
            lo, hi = to_days(lo), to_days(hi)
        lo, hi = min(lo, hi), max(lo, hi)
        return np.nonzero((c >= lo) & (c <= hi))[0]
    # a single coordinate value: exact match
    v = to_days(sel) if grid.kind == DimKind.TEMPORAL else sel
    return np.nonzero(c == v)[0]


def _serial_range(sel):
    if isinstance(sel, slice):
        return {"slice": [sel.start, sel.stop]}
    if isinstance(sel, (list, tuple)):
        return list(sel)
    return sel


def subset(cube: DataCube, ranges: Optional[Mapping[str, Any]] = None, **kw) -> DataCube:
    """Restrict a cube to coordinate or index ranges.

    Each entry of ``ranges`` maps a dimension name to one of

    * ``(lo, hi)`` -- closed coordinate interval on cell centers
      (ISO dates or epoch days for time),
    * a ``slice`` -- index range,
    * a string or list of strings -- exact match on a categorical grid,
    * a scalar -- a single coordinate, which drops the dimension.

    The key ``"variable"`` selects variables by name.  A dimension reduced to
    one coordinate is dropped; zero coordinates raise :class:`EmptySelection`.
    """
    ranges = dict(ranges or {})
    ranges.update(kw)
    variables = list(cube.variables)
    if "variable" in ranges:
        want = ranges.pop("variable")
        want = [want] if isinstance(want, str) else list(want)
        for v in want:
            if v not in cube.variables:
                raise UnknownDimension(f"unknown variable {v!r}")
        variables = want
    for name in ranges:
        cube.axis(name)

    index_sets = []
    for g in cube.schema.grids:
        if g.name in ranges:
            idx = _select_indices(g, ranges[g.name])
            if idx.size == 0:
                raise EmptySelection(f"selection on {g.name!r} matches no coordinates")
        else:
            idx = np.arange(len(g))
        index_sets.append(idx)

    origin = [int(i.min()) for i in index_sets]
    wshape = [int(i.max()) - o + 1 for i, o in zip(index_sets, origin)]
    local = tuple(i - o for i, o in zip(index_sets, origin))

    new_grids, keep_axes, chunks = [], [], []
    for ax, (g, idx) in enumerate(zip(cube.schema.grids, index_sets)):
        if idx.size >= 2:
            contiguous = bool(np.all(np.diff(idx) == 1))
            regular = bool(g.regular) and contiguous if g.kind != DimKind.CATEGORICAL else False
            new_grids.append(g.with_coordinates(g.coordinates[idx], regular=regular))
            keep_axes.append(ax)
            chunks.append(min(cube.schema.chunk_shape[ax], idx.size))

    data = {}
    for v in variables:
        block = cube.read_window(v, origin, wshape)
        block = block[np.ix_(*local)] if local else block
        squeeze = tuple(ax for ax in range(block.ndim) if ax not in keep_axes)
        data[v] = np.squeeze(block, axis=squeeze) if squeeze else block
    out = DataCube.from_numpy(
        data, new_grids, chunks=chunks, attrs=cube.attrs.restrict(variables, [g.name for g in new_grids])
    )
    params = {k: _serial_range(v) for k, v in ranges.items()}
    if variables != list(cube.variables):
        params["variable"] = variables
    return stamp(out, "subset", {"ranges": params})
