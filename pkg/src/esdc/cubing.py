"""Aligning heterogeneous inputs onto a common grid.

Spatial regridding is separable: each method builds one weight matrix per
axis (target cells x source cells) and the result is
``A_lat @ field @ A_lon.T``.  Aggregating methods (block mean, conservative)
divide by the same product applied to the valid-data mask, which ignores NA
contributors and renormalises; bilinear marks a target NA when any
contributor with non-zero weight is NA.  Matrices are row-normalised so that
regridding onto the source grid reproduces the data exactly.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConservativeOnIrregularGrid,
    DuplicateVariableName,
    IncompatibleUnits,
    MissingSpatialDims,
    NonTemporalCube,
    TargetFinerThanSource,
    ValidationError,
)
from .model import AttributeSet, CubeSchema, DataCube, DimKind, Grid, _spacing_regular, stamp, validate_grid

FULL_CIRCLE = 360.0


class RegridMethod(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BLOCK_MEAN = "block_mean"
    CONSERVATIVE = "conservative"


class AccessPattern(str, Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    HYBRID = "hybrid"


# ---------------------------------------------------------------------------
# per-axis geometry


def cell_edges(grid: Grid, clip_lat: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Lower/upper edges of every cell, in the grid's own order."""
    c = grid.coordinates.astype(np.float64)
    if grid.regular:
        half = abs(grid.step) / 2.0
        lo, hi = c - half, c + half
    else:
        order = np.argsort(c)
        e = grid.with_coordinates(c[order]).edges()
        lo, hi = np.empty_like(c), np.empty_like(c)
        lo[order], hi[order] = e[:-1], e[1:]
    if clip_lat:
        lo, hi = np.clip(lo, -90.0, 90.0), np.clip(hi, -90.0, 90.0)
    return lo, hi


def _is_global_lon(grid: Grid) -> bool:
    lo, hi = cell_edges(grid)
    return math.isclose(float(hi.max() - lo.min()), FULL_CIRCLE, rel_tol=1e-9)


def _circular_overlap(a0, a1, b0, b1):
    """Overlap length of intervals on a circle of circumference 360 (broadcasting)."""
    total = 0.0
    for k in (-1.0, 0.0, 1.0):
        shift = k * FULL_CIRCLE
        total = total + np.maximum(0.0, np.minimum(a1, b1 + shift) - np.maximum(a0, b0 + shift))
    return total


def _nearest_index(src: Grid, tgt: Grid, periodic: bool) -> np.ndarray:
    """Nearest source index per target cell (-1 when outside the source extent)."""
    s = src.coordinates.astype(np.float64)
    t = tgt.coordinates.astype(np.float64)
    d = np.abs(t[:, None] - s[None, :])
    if periodic:
        d = np.minimum(d, FULL_CIRCLE - np.mod(d, FULL_CIRCLE))
    idx = np.argmin(d, axis=1)  # first minimum == smaller source index on ties
    if not periodic:
        lo, hi = cell_edges(src)
        idx = np.where((t >= lo.min()) & (t <= hi.max()), idx, -1)
    return idx


def _bilinear_matrix(src: Grid, tgt: Grid, periodic: bool) -> np.ndarray:
    s = src.coordinates.astype(np.float64)
    t = tgt.coordinates.astype(np.float64)
    order = np.argsort(s)
    ss = s[order]
    n = ss.size
    A = np.zeros((t.size, n))
    if periodic:
        offs = ss - ss[0]
        u = np.mod(t - ss[0], FULL_CIRCLE)
        for r, ur in enumerate(u):
            i = int(np.searchsorted(offs, ur, side="right") - 1)
            j = (i + 1) % n
            nxt = offs[j] + (FULL_CIRCLE if j == 0 else 0.0)
            frac = (ur - offs[i]) / (nxt - offs[i])
            A[r, i] += 1.0 - frac
            A[r, j] += frac
    else:
        lo, hi = cell_edges(src)
        lo_edge, hi_edge = lo.min(), hi.max()
        for r, tr in enumerate(t):
            if tr < lo_edge or tr > hi_edge:
                continue
            if tr <= ss[0]:
                A[r, 0] = 1.0
            elif tr >= ss[-1]:
                A[r, n - 1] = 1.0
            else:
                i = int(np.searchsorted(ss, tr, side="right") - 1)
                frac = (tr - ss[i]) / (ss[i + 1] - ss[i])
                A[r, i] = 1.0 - frac
                A[r, i + 1] = frac
    out = np.zeros_like(A)
    out[:, order] = A
    return out


def _block_matrix(src: Grid, tgt: Grid, periodic: bool, is_lat: bool = False) -> np.ndarray:
    s = src.coordinates.astype(np.float64)
    lo, hi = cell_edges(tgt, clip_lat=is_lat)
    if periodic:
        inside = np.mod(s[None, :] - lo[:, None], FULL_CIRCLE) < (hi - lo)[:, None]
    else:
        inside = (s[None, :] >= lo[:, None]) & (s[None, :] < hi[:, None])
    return inside.astype(np.float64)


def _conservative_matrix(src: Grid, tgt: Grid, is_lat: bool) -> np.ndarray:
    for g in (src, tgt):
        if not g.regular or not _spacing_regular(g.coordinates):
            raise ConservativeOnIrregularGrid(f"conservative regridding needs regular grids; {g.name!r} is not")
    if is_lat:
        slo, shi = cell_edges(src, clip_lat=True)
        tlo, thi = cell_edges(tgt, clip_lat=True)
        top = np.radians(np.minimum(thi[:, None], shi[None, :]))
        bot = np.radians(np.maximum(tlo[:, None], slo[None, :]))
        return np.where(top > bot, np.sin(top) - np.sin(bot), 0.0)
    slo, shi = cell_edges(src)
    tlo, thi = cell_edges(tgt)
    return _circular_overlap(tlo[:, None], thi[:, None], slo[None, :], shi[None, :])


def _row_normalise(A: np.ndarray) -> np.ndarray:
    s = A.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, A / np.where(s > 0, s, 1.0), 0.0)


def regrid_array(values: np.ndarray, src_lat: Grid, src_lon: Grid, tgt_lat: Grid, tgt_lon: Grid,
                 method: Union[str, RegridMethod]) -> np.ndarray:
    """Regrid the two trailing axes (lat, lon) of ``values``."""
    method = RegridMethod(method)
    for g in (tgt_lat, tgt_lon):
        validate_grid(g)
    periodic = _is_global_lon(src_lon)
    v = np.asarray(values, dtype=np.float64)
    if method == RegridMethod.NEAREST:
        ilat = _nearest_index(src_lat, tgt_lat, periodic=False)
        ilon = _nearest_index(src_lon, tgt_lon, periodic=periodic)
        out = v[..., np.maximum(ilat, 0), :][..., np.maximum(ilon, 0)]
        out[..., ilat < 0, :] = np.nan
        out[..., :, ilon < 0] = np.nan
        return out
    if method == RegridMethod.BILINEAR:
        A = _bilinear_matrix(src_lat, tgt_lat, periodic=False)
        B = _bilinear_matrix(src_lon, tgt_lon, periodic=periodic)
        na = np.isnan(v)
        out = A @ np.where(na, 0.0, v) @ B.T
        bad = ((A > 0).astype(np.float64) @ na.astype(np.float64) @ (B > 0).astype(np.float64).T) > 0
        uncovered = (A.sum(axis=1) == 0)[:, None] | (B.sum(axis=1) == 0)[None, :]
        out[bad | uncovered] = np.nan
        return out
    if method == RegridMethod.BLOCK_MEAN:
        A = _row_normalise(_block_matrix(src_lat, tgt_lat, periodic=False, is_lat=True))
        B = _row_normalise(_block_matrix(src_lon, tgt_lon, periodic=periodic))
    else:
        A = _row_normalise(_conservative_matrix(src_lat, tgt_lat, is_lat=True))
        B = _row_normalise(_conservative_matrix(src_lon, tgt_lon, is_lat=False))
    ok = ~np.isnan(v)
    num = A @ np.where(ok, v, 0.0) @ B.T
    den = A @ ok.astype(np.float64) @ B.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[den <= 0] = np.nan
    return out


def _grid_params(g: Grid):
    """Compact description of a grid; falls back to the full coordinate list
    when start/step/n would not rebuild it bit for bit."""
    c = g.coordinates.astype(np.float64)
    out = {"coords": c.tolist()}
    if g.regular:
        start, step = float(c[0]), float(c[1] - c[0])
        if np.array_equal(start + step * np.arange(len(c), dtype=np.float64), c):
            out = {"start": start, "step": step, "n": len(g)}
    if g.units:
        out["units"] = g.units
    return out


def grid_from_params(name: str, p: Mapping, units: str = "") -> Grid:
    units = p.get("units", units)
    if "coords" in p:
        return Grid(name, p["coords"], DimKind.SPATIAL, units)
    return Grid.regular_range(name, p["start"], p["step"], p["n"], kind=DimKind.SPATIAL, units=units)


def regrid_spatial(cube: DataCube, target_lat: Grid, target_lon: Grid,
                   method: Union[str, RegridMethod] = RegridMethod.NEAREST) -> DataCube:
    """Resample the lat/lon axes of every variable onto the target grids."""
    method = RegridMethod(method)
    lat, lon = cube.schema.lat_dim, cube.schema.lon_dim
    if lat is None or lon is None:
        raise MissingSpatialDims(f"cube has no lat/lon dimensions: {list(cube.dims)}")
    src_lat, src_lon = cube.grid(lat), cube.grid(lon)
    tgt_lat = Grid(lat, target_lat.coordinates, DimKind.SPATIAL, src_lat.units or target_lat.units,
                   target_lat.regular, src_lat.crs)
    tgt_lon = Grid(lon, target_lon.coordinates, DimKind.SPATIAL, src_lon.units or target_lon.units,
                   target_lon.regular, src_lon.crs)
    ia, io = cube.axis(lat), cube.axis(lon)
    data = {}
    for v in cube.variables:
        arr = np.moveaxis(cube.values(v), (ia, io), (-2, -1))
        out = regrid_array(arr, src_lat, src_lon, tgt_lat, tgt_lon, method)
        data[v] = np.moveaxis(out, (-2, -1), (ia, io))
    grids = list(cube.schema.grids)
    grids[ia], grids[io] = tgt_lat, tgt_lon
    out = cube.with_data(data, grids=grids)
    params = {"lat": _grid_params(tgt_lat), "lon": _grid_params(tgt_lon), "method": method.value}
    return stamp(out, "regrid_spatial", params)


# ---------------------------------------------------------------------------
# temporal aggregation

REDUCERS = ("mean", "median", "count")


def _time_bins(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Target bin index for every source time (-1 outside all bins).

    Bin k is ``[t_k, t_{k+1})``; the last bin has the width of the one before.
    """
    order = np.argsort(tgt)
    t = tgt[order].astype(np.int64)
    edges = np.append(t, t[-1] + (t[-1] - t[-2]))
    k = np.searchsorted(edges, src, side="right") - 1
    valid = (k >= 0) & (k < t.size)
    out = np.full(src.shape, -1, dtype=np.int64)
    out[valid] = order[k[valid]]
    return out


def aggregate_temporal(cube: DataCube, target_time: Grid, reducer: str = "mean", min_count: int = 1) -> DataCube:
    """Reduce source time steps into the bins defined by ``target_time``.

    Bins holding fewer than ``min_count`` non-NA values are NA (``count``
    always returns the number of non-NA values, never NA).
    """
    if reducer not in REDUCERS:
        raise ValidationError(f"unknown reducer {reducer!r}; choose from {REDUCERS}")
    tdim = cube.schema.time_dim
    if tdim is None:
        raise NonTemporalCube("cube has no temporal dimension")
    validate_grid(target_time)
    src = cube.grid(tdim).coordinates
    tgt = Grid(tdim, target_time.coordinates, DimKind.TEMPORAL, regular=target_time.regular)
    bins = _time_bins(src, tgt.coordinates)
    if np.all(bins < 0):
        raise TargetFinerThanSource("no source time step falls into any target bin")
    ax = cube.axis(tdim)
    n = len(tgt)
    data = {}
    for v in cube.variables:
        arr = np.moveaxis(cube.values(v), ax, 0)
        out = np.empty((n,) + arr.shape[1:])
        for k in range(n):
            members = arr[bins == k]
            cnt = np.sum(~np.isnan(members), axis=0)
            if reducer == "count":
                out[k] = cnt
                continue
            if members.shape[0] == 0:
                out[k] = np.nan
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                if reducer == "mean":
                    val = np.nansum(members, axis=0) / cnt
                else:
                    val = _nanmedian(members)
            out[k] = np.where(cnt >= max(min_count, 1), val, np.nan)
        data[v] = np.moveaxis(out, 0, ax)
    grids = list(cube.schema.grids)
    grids[ax] = tgt
    out = cube.with_data(data, grids=grids)
    if reducer == "count":
        out = out.with_attrs(_set_all_vars(out, units="1"))
    params = {"time": tgt.coordinates.tolist(), "reducer": reducer, "min_count": int(min_count)}
    return stamp(out, "aggregate_temporal", params)


def _nanmedian(a):
    if np.all(np.isnan(a)):
        return np.full(a.shape[1:], np.nan)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(a, axis=0)


def _set_all_vars(cube, **entries):
    attrs = cube.attrs
    for v in cube.variables:
        attrs = attrs.update_variable(v, **entries)
    return attrs


# ---------------------------------------------------------------------------
# multivariate assembly


def align_to_schema(
    cubes: Sequence[DataCube],
    target: CubeSchema,
    methods: Optional[Mapping[str, Mapping[str, str]]] = None,
    mosaic: bool = False,
) -> DataCube:
    """Bring univariate cubes onto ``target`` and stack them as variables.

    ``methods`` maps a variable name to ``{"spatial": <RegridMethod>,
    "temporal": <reducer>, "min_count": n}``; defaults are nearest and mean.
    Target variables without a source are all-NA.  Two inputs with the same
    variable name are an error unless ``mosaic=True``, in which case they
    are combined with the earlier cube taking precedence where it has data;
    their declared units must agree either way.
    """
    methods = dict(methods or {})
    tgt = {g.name: g for g in target.grids}
    shape = target.shape
    lat, lon, tdim = target.lat_dim, target.lon_dim, target.time_dim

    units: Dict[str, str] = {}
    fields: Dict[str, np.ndarray] = {}
    var_attrs: Dict[str, dict] = {}
    for cube in cubes:
        for v in cube.variables:
            u = cube.attrs.variable(v).get("units", "")
            if v in units and units[v] != u:
                raise IncompatibleUnits(f"variable {v!r} declared with units {units[v]!r} and {u!r}")
            if v in fields and not mosaic:
                raise DuplicateVariableName(f"variable {v!r} provided more than once")
            if v not in target.variables:
                raise ValidationError(f"variable {v!r} is not part of the target schema {list(target.variables)}")
            units[v] = u
            m = methods.get(v, {})
            single = subset_vars(cube, [v])
            arr = _to_target(single, target, tgt, lat, lon, tdim, m)
            if v in fields:
                fields[v] = np.where(np.isnan(fields[v]), arr, fields[v])
            else:
                fields[v] = arr
                var_attrs[v] = cube.attrs.variable(v)
    data = {v: fields.get(v, np.full(shape, np.nan)) for v in target.variables}
    first = cubes[0].attrs.cube if cubes else {}
    attrs = AttributeSet({k: val for k, val in first.items() if k != "history"}, {}, var_attrs)
    out = DataCube.from_numpy(data, target.grids, chunks=target.chunk_shape, attrs=attrs)
    params = {
        "variables": list(target.variables),
        "dims": list(target.dims),
        "methods": {k: dict(v) for k, v in methods.items()},
        "mosaic": mosaic,
    }
    return stamp(out, "align_to_schema", params)


def subset_vars(cube: DataCube, variables):
    return DataCube(
        CubeSchema(cube.schema.grids, tuple(variables), cube.schema.chunk_shape),
        cube.attrs,
        {v: cube.array(v) for v in variables},
    )


def _to_target(cube, target, tgt, lat, lon, tdim, m) -> np.ndarray:
    work = cube
    if lat and lon and cube.schema.lat_dim and cube.schema.lon_dim:
        same = cube.grid(cube.schema.lat_dim).same_coordinates(tgt[lat]) and cube.grid(
            cube.schema.lon_dim).same_coordinates(tgt[lon])
        if not same:
            work = regrid_spatial(work, tgt[lat], tgt[lon], m.get("spatial", "nearest"))
    if tdim and work.schema.time_dim:
        if not work.grid(work.schema.time_dim).same_coordinates(tgt[tdim]):
            work = aggregate_temporal(work, tgt[tdim], m.get("temporal", "mean"), int(m.get("min_count", 1)))
    # map source dims onto target dims
    rename = {}
    if work.schema.lat_dim and lat:
        rename[work.schema.lat_dim] = lat
    if work.schema.lon_dim and lon:
        rename[work.schema.lon_dim] = lon
    if work.schema.time_dim and tdim:
        rename[work.schema.time_dim] = tdim
    src_dims = [rename.get(d, d) for d in work.dims]
    for d in src_dims:
        if d not in tgt:
            raise ValidationError(f"dimension {d!r} is not in the target schema")
        if d not in (lat, lon, tdim) and not work.grid(d).same_coordinates(tgt[d]):
            raise ValidationError(f"grid {d!r} differs from the target and cannot be regridded")
    arr = work.values(work.variables[0])
    order = [src_dims.index(d) for d in target.dims if d in src_dims]
    arr = np.transpose(arr, order)
    expand = tuple(slice(None) if d in src_dims else np.newaxis for d in target.dims)
    return np.array(np.broadcast_to(arr[expand], target.shape))


# ---------------------------------------------------------------------------
# chunking


def _fit(lengths: Sequence[int], budget: int) -> Tuple[int, ...]:
    """Extents proportional to ``lengths`` with product <= budget, each in [1, n]."""
    lengths = [int(n) for n in lengths]
    if not lengths:
        return ()
    budget = max(int(budget), 1)
    if int(np.prod(lengths, dtype=np.float64)) <= budget:
        return tuple(lengths)
    s = (budget / float(np.prod(lengths, dtype=np.float64))) ** (1.0 / len(lengths))
    ext = [min(n, max(1, int(math.floor(n * s)))) for n in lengths]

    def prod(e):
        return int(np.prod(e, dtype=np.int64))

    while prod(ext) > budget:
        i = max((i for i in range(len(ext)) if ext[i] > 1), key=lambda i: ext[i])
        ext[i] -= 1
    grown = True
    while grown:
        grown = False
        for i in sorted(range(len(ext)), key=lambda i: ext[i] / lengths[i]):
            if ext[i] < lengths[i] and prod(ext) // ext[i] * (ext[i] + 1) <= budget:
                ext[i] += 1
                grown = True
    return tuple(ext)


def suggest_chunking(schema: CubeSchema, pattern: Union[str, AccessPattern], target_chunk_bytes: int) -> Tuple[int, ...]:
    """Chunk shape (schema dimension order) for an access pattern and byte budget."""
    pattern = AccessPattern(pattern)
    if target_chunk_bytes < 8:
        raise ValidationError("target_chunk_bytes must be at least 8")
    budget = int(target_chunk_bytes) // 8
    shape = schema.shape
    dims = schema.dims
    if int(np.prod(shape, dtype=np.float64)) <= budget:
        return tuple(shape)
    tdim = schema.time_dim
    spatial = [i for i, g in enumerate(schema.grids) if g.kind == DimKind.SPATIAL]
    out = [1] * len(shape)
    if pattern == AccessPattern.TEMPORAL and tdim is not None:
        it = dims.index(tdim)
        out[it] = min(shape[it], budget)
        sp = _fit([shape[i] for i in spatial], budget // out[it])
        for i, e in zip(spatial, sp):
            out[i] = e
    elif pattern == AccessPattern.SPATIAL and spatial:
        sp = _fit([shape[i] for i in spatial], budget)
        for i, e in zip(spatial, sp):
            out[i] = e
        if tdim is not None:
            it = dims.index(tdim)
            out[it] = max(1, min(shape[it], budget // int(np.prod(sp, dtype=np.int64))))
    else:
        out = list(_fit(shape, budget))
    return tuple(out)
