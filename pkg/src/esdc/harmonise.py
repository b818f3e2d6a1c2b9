"""Harmonisation and transformation of cubes.

Regular gapless time axes, linear gap filling, day-of-year climatologies,
anomalies, additive trend/seasonal/residual decomposition and derived
variables from arithmetic expressions.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import expr, kernels
from .errors import (
    DuplicateName,
    GapsPresent,
    GridMismatch,
    IrregularTimeGrid,
    NonPositiveStep,
    NonTemporalCube,
    SpanTooShort,
    TooFewCoordinates,
    UnknownVariable,
    ValidationError,
    WindowTooLarge,
)
from .model import DataCube, DimKind, Grid, day_of_year_366, stamp

DOY_SLOTS = 366
COMPONENTS = ("raw", "trend", "seasonal", "residual")


def _time_axis(cube: DataCube):
    tdim = cube.schema.time_dim
    if tdim is None:
        raise NonTemporalCube("cube has no temporal dimension")
    return tdim, cube.axis(tdim)


def _require_regular(cube: DataCube, tdim: str):
    g = cube.grid(tdim)
    d = np.diff(g.coordinates)
    if not (d.size and np.all(d == d[0]) and d[0] > 0):
        raise IrregularTimeGrid(f"time grid {tdim!r} is not regular and increasing")
    return int(d[0])


def doy_grid() -> Grid:
    return Grid("doy", np.arange(1, DOY_SLOTS + 1, dtype=np.float64), DimKind.OTHER, "day of year", True)


def regularise_values(times, values, step_days: int = 1):
    """Bin ``values`` (time on axis 0) onto ``min, min+step, ... <= max``.

    ``times`` are epoch days and may repeat or be unsorted; every output step
    is the mean of the non-NA values falling into it, NA when there are none.
    Returns ``(step_times, binned)``.
    """
    if step_days <= 0:
        raise NonPositiveStep(f"step must be positive, got {step_days}")
    t = np.asarray(times, dtype=np.int64)
    arr = np.asarray(values, dtype=np.float64)
    t0 = int(t.min())
    n = (int(t.max()) - t0) // step_days + 1
    k = (t - t0) // step_days
    ok = ~np.isnan(arr)
    s = np.zeros((n,) + arr.shape[1:])
    c = np.zeros((n,) + arr.shape[1:])
    np.add.at(s, k, np.where(ok, arr, 0.0))
    np.add.at(c, k, ok.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(c > 0, s / np.where(c > 0, c, 1.0), np.nan)
    return t0 + step_days * np.arange(n, dtype=np.int64), out


def regularise_time(cube: DataCube, step_days: int = 1) -> DataCube:
    """Resample onto ``min, min+step, ... <= max``; empty steps are NA, shared steps averaged."""
    tdim, ax = _time_axis(cube)
    if step_days <= 0:
        raise NonPositiveStep(f"step must be positive, got {step_days}")
    t = cube.grid(tdim).coordinates
    if (int(t.max()) - int(t.min())) // step_days + 1 < 2:
        raise TooFewCoordinates("regularised time axis would have fewer than 2 steps")
    data = {}
    for v in cube.variables:
        steps, out = regularise_values(t, np.moveaxis(cube.values(v), ax, 0), step_days)
        data[v] = np.moveaxis(out, 0, ax)
    grids = list(cube.schema.grids)
    grids[ax] = Grid(tdim, steps, DimKind.TEMPORAL, regular=True)
    out = cube.with_data(data, grids=grids)
    return stamp(out, "regularise_time", {"step_days": int(step_days)})


def gapfill_linear(cube: DataCube, max_gap: int) -> DataCube:
    """Fill interior NA runs of at most ``max_gap`` steps by linear interpolation."""
    tdim, ax = _time_axis(cube)
    _require_regular(cube, tdim)
    if max_gap < 0:
        raise ValidationError("max_gap must be >= 0")
    data = {}
    for v in cube.variables:
        arr = np.moveaxis(cube.values(v), ax, -1)
        rows = np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))
        kernels.gapfill_rows(rows, int(max_gap))
        data[v] = np.moveaxis(rows.reshape(arr.shape), -1, ax)
    out = cube.with_data(data)
    return stamp(out, "gapfill_linear", {"max_gap": int(max_gap)})


def _doy_sums(arr: np.ndarray, doy0: np.ndarray):
    """Per day-of-year slot sums and counts of non-NA values (time on axis 0)."""
    ok = ~np.isnan(arr)
    s = np.zeros((DOY_SLOTS,) + arr.shape[1:])
    c = np.zeros((DOY_SLOTS,) + arr.shape[1:])
    np.add.at(s, doy0, np.where(ok, arr, 0.0))
    np.add.at(c, doy0, ok.astype(np.float64))
    return s, c


def _windowed_mean(s, c, window):
    h = (window - 1) // 2
    sw = np.zeros_like(s)
    cw = np.zeros_like(c)
    for k in range(-h, h + 1):
        sw += np.roll(s, -k, axis=0)
        cw += np.roll(c, -k, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cw > 0, sw / np.where(cw > 0, cw, 1.0), np.nan)


def climatology(cube: DataCube, smoothing_window: int = 1) -> DataCube:
    """Mean seasonal cycle on a 366-slot day-of-year axis.

    Each slot averages every value whose day of year lies within
    ``(window - 1) / 2`` slots of it, wrapping around the year end.  The
    result replaces the time dimension by ``doy`` (1..366).
    """
    tdim, ax = _time_axis(cube)
    if smoothing_window < 1 or smoothing_window % 2 == 0:
        raise ValidationError("smoothing_window must be a positive odd integer")
    t = cube.grid(tdim).coordinates
    step = int(np.min(np.diff(t))) if t.size > 1 else 1
    if int(t.max()) - int(t.min()) + step < 365:
        raise SpanTooShort("climatology needs a time axis spanning at least one year")
    doy0 = day_of_year_366(t) - 1
    data = {}
    for v in cube.variables:
        arr = np.moveaxis(cube.values(v), ax, 0)
        s, c = _doy_sums(arr, doy0)
        data[v] = np.moveaxis(_windowed_mean(s, c, smoothing_window), 0, ax)
    grids = list(cube.schema.grids)
    grids[ax] = doy_grid()
    chunks = list(cube.schema.chunk_shape)
    chunks[ax] = DOY_SLOTS
    out = cube.with_data(data, grids=grids, chunks=chunks)
    out = out.with_attrs(out.attrs.update_cube(smoothing_window=str(smoothing_window)))
    return stamp(out, "climatology", {"smoothing_window": int(smoothing_window)})


def _check_compatible(cube: DataCube, clim: DataCube, tdim: str):
    if "doy" not in clim.dims:
        raise GridMismatch("climatology has no doy dimension")
    a = [g for g in cube.schema.grids if g.name != tdim]
    b = [g for g in clim.schema.grids if g.name != "doy"]
    if [g.name for g in a] != [g.name for g in b] or not all(x.same_coordinates(y) for x, y in zip(a, b)):
        raise GridMismatch("climatology grids do not match the cube")
    missing = [v for v in cube.variables if v not in clim.variables]
    if missing:
        raise GridMismatch(f"climatology lacks variables {missing}")


def _tiled(cube: DataCube, clim: DataCube, v: str, tdim: str) -> np.ndarray:
    """Climatology values at each time step, laid out like the cube (time first)."""
    doy0 = day_of_year_366(cube.grid(tdim).coordinates) - 1
    c = np.moveaxis(clim.values(v), clim.axis("doy"), 0)
    return c[doy0]


def anomalies(cube: DataCube, clim: DataCube) -> DataCube:
    """``cube - climatology`` at each time step's day of year."""
    tdim, ax = _time_axis(cube)
    _check_compatible(cube, clim, tdim)
    data = {}
    for v in cube.variables:
        arr = np.moveaxis(cube.values(v), ax, 0)
        data[v] = np.moveaxis(arr - _tiled(cube, clim, v, tdim), 0, ax)
    out = cube.with_data(data)
    attrs = out.attrs
    for v in cube.variables:
        attrs = attrs.update_variable(v, anomaly="true")
    window = clim.attrs.cube.get("smoothing_window", "")
    return stamp(out.with_attrs(attrs), "anomalies", {"smoothing_window": window})


def _moving_average(arr: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 0; NA within (window-1)/2 of the ends."""
    h = (window - 1) // 2
    out = np.full(arr.shape, np.nan)
    if arr.shape[0] >= window:
        out[h: arr.shape[0] - h] = sliding_window_view(arr, window, axis=0).mean(axis=-1)
    return out


def _exact_residual(raw, partial):
    """Residual r with ``partial + r == raw`` in floating point wherever attainable."""
    r = raw - partial
    for _ in range(8):
        total = partial + r
        bad = (total != raw) & ~np.isnan(total)
        if not bad.any():
            break
        r[bad] = np.nextafter(r[bad], np.where(total[bad] < raw[bad], np.inf, -np.inf))
    return r


def decompose(cube: DataCube, trend_window: int) -> DataCube:
    """Classical additive decomposition along a new ``component`` axis.

    trend is a centered moving average, seasonal the day-of-year mean of
    ``raw - trend`` tiled back onto the time axis, and residual is chosen so
    that ``(trend + seasonal) + residual`` reproduces ``raw`` exactly.
    """
    tdim, ax = _time_axis(cube)
    _require_regular(cube, tdim)
    if trend_window < 1 or trend_window % 2 == 0:
        raise ValidationError("trend_window must be a positive odd integer")
    n = len(cube.grid(tdim))
    if trend_window > n:
        raise WindowTooLarge(f"trend window {trend_window} exceeds the {n} time steps")
    doy0 = day_of_year_366(cube.grid(tdim).coordinates) - 1
    data = {}
    for v in cube.variables:
        raw = np.moveaxis(cube.values(v), ax, 0)
        na = np.isnan(raw)
        partial_na = na.any(axis=0) & ~na.all(axis=0)
        if partial_na.any():
            raise GapsPresent(f"variable {v!r} has gaps; gap-fill before decomposing")
        trend = _moving_average(raw, trend_window)
        s, c = _doy_sums(raw - trend, doy0)
        with np.errstate(invalid="ignore", divide="ignore"):
            seas_clim = np.where(c > 0, s / np.where(c > 0, c, 1.0), np.nan)
        seasonal = seas_clim[doy0]
        residual = _exact_residual(raw, trend + seasonal)
        stacked = np.stack([raw, trend, seasonal, residual], axis=-1)
        data[v] = np.moveaxis(stacked, 0, ax)
    comp = Grid("component", np.array(COMPONENTS), DimKind.CATEGORICAL)
    grids = list(cube.schema.grids) + [comp]
    chunks = list(cube.schema.chunk_shape) + [len(COMPONENTS)]
    out = cube.with_data(data, grids=grids, chunks=chunks)
    return stamp(out, "decompose", {"trend_window": int(trend_window)})


def evaluate_expression(cube: DataCube, expression: str, new_name: str) -> DataCube:
    """Add variable ``new_name`` computed cell-wise from ``expression``."""
    if new_name in cube.variables:
        raise DuplicateName(f"variable {new_name!r} already exists")
    if not new_name.isidentifier():
        raise ValidationError(f"invalid variable name {new_name!r}")
    tree = expr.parse(expression)
    unknown = sorted(expr.identifiers(tree) - set(cube.variables))
    if unknown:
        raise UnknownVariable(f"unknown variable(s) {unknown} in {expression!r}")
    env = {v: cube.values(v) for v in expr.identifiers(tree)}
    result = np.array(np.broadcast_to(expr.evaluate(tree, env), cube.shape), dtype=np.float64)
    data = {v: cube.values(v) for v in cube.variables}
    data[new_name] = result
    attrs = cube.attrs.update_variable(new_name, expression=expression)
    out = cube.with_data(data, attrs=attrs)
    return stamp(out, "evaluate_expression", {"expression": expression, "name": new_name})
