"""``esdc`` command line: build, transform, analyse and render cubes.

Exit status is 0 on success, 2 on usage errors and 1 on data errors;
diagnostics go to stderr only.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import cubing, harmonise, sampling, stats, store
from .errors import CLIError, ESDCError, ValidationError
from .model import (
    AttributeSet,
    DataCube,
    DimKind,
    Grid,
    iso_date,
    lat_grid,
    lon_grid,
    set_fixed_time,
    stamp,
    to_days,
)
from .render import render_face
from .synthetic import PRESETS, gen_synthetic


# -- argument types --------------------------------------------------------


def _ints(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("sizes must be positive")
    return vals


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# -- CSV ingest --------------------------------------------------------------


def cube_from_csv(path, chunks: Optional[Sequence[int]] = None) -> DataCube:
    """Read ``time,lat,lon,<var>...`` rows (ISO dates, one row per cell-time).

    Grids are the sorted distinct coordinates; cells without a row are NA.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        if header[:3] != ["time", "lat", "lon"] or len(header) < 4:
            raise ValidationError("CSV header must start with time,lat,lon followed by variables")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    variables = header[3:]
    if len(set(variables)) != len(variables):
        raise ValidationError("duplicate variable columns in CSV")
    if not rows:
        raise ValidationError(f"{path} has no data rows")
    try:
        t = np.array([to_days(r[0].strip()) for r in rows], dtype=np.int64)
        lat = np.array([float(r[1]) for r in rows])
        lon = np.array([float(r[2]) for r in rows])
        vals = np.array([[float(c) if c.strip() not in ("", "NA", "nan", "NaN") else np.nan for c in r[3:]]
                         for r in rows])
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"malformed CSV row: {exc}") from None
    if vals.shape[1] != len(variables):
        raise ValidationError("CSV rows do not match the header width")
    ut, it = np.unique(t, return_inverse=True)
    ula, ila = np.unique(lat, return_inverse=True)
    ulo, ilo = np.unique(lon, return_inverse=True)
    key = (it * len(ula) + ila) * len(ulo) + ilo
    if np.unique(key).size != key.size:
        raise ValidationError("CSV has duplicate (time, lat, lon) rows")
    grids = [
        Grid("time", ut, DimKind.TEMPORAL),
        Grid("lat", ula, DimKind.SPATIAL, units="degrees_north"),
        Grid("lon", ulo, DimKind.SPATIAL, units="degrees_east"),
    ]
    shape = (len(ut), len(ula), len(ulo))
    data = {}
    for j, v in enumerate(variables):
        a = np.full(shape, np.nan)
        a[it.reshape(-1), ila.reshape(-1), ilo.reshape(-1)] = vals[:, j]
        data[v] = a
    attrs = AttributeSet({"source": Path(path).name}, {}, {})
    return DataCube.from_numpy(data, grids, chunks=chunks, attrs=attrs)


# -- subcommands -------------------------------------------------------------


def _write(cube: DataCube, args, path=None) -> None:
    store.write_cube(cube, path or args.output, compression=args.compression,
                     overwrite=args.overwrite, workers=args.workers)


def cmd_create(args) -> None:
    if args.from_csv:
        cube = cube_from_csv(args.from_csv, args.chunks)
        cube = stamp(cube, "create", {"csv": Path(args.from_csv).name})
        truth = None
    else:
        cube, truth = gen_synthetic(args.preset, args.shape, args.seed, args.chunks)
        params = {"preset": args.preset, "seed": args.seed, "shape": list(cube.shape)}
        cube = stamp(cube, "create", params)
    _write(cube, args)
    if truth is not None:
        sampling.write_report(truth, str(args.output).rstrip("/") + ".truth.jsonl")


def cmd_info(args) -> None:
    cube = store.open_cube(args.input)
    out = [f"dimensions: {', '.join(f'{d}={n}' for d, n in zip(cube.dims, cube.shape))}"]
    out.append(f"order: {len(cube.dims)}")
    out.append("grids:")
    out += [f"  {g.describe()}" for g in cube.schema.grids]
    out.append("variables:")
    for v in cube.variables:
        a = cube.attrs.variable(v)
        extra = ", ".join(f"{k}={a[k]}" for k in sorted(a))
        out.append(f"  {v}" + (f" ({extra})" if extra else ""))
    out.append(f"chunking: {'x'.join(str(c) for c in cube.schema.chunk_shape)}"
               f" (chunk grid {'x'.join(str(c) for c in cube.schema.chunk_grid())})")
    hist = cube.attrs.history_lines()
    if hist:
        out.append("history:")
        out += [f"  {h}" for h in hist]
    print("\n".join(out))


def cmd_resample(args) -> None:
    cube = store.open_cube(args.input)
    if args.target_grid is None and args.time_step is None:
        raise CLIError("resample needs --target-grid and/or --time-step")
    if args.target_grid is not None:
        res = args.target_grid
        lat_res, lon_res = (res[0], res[0]) if len(res) == 1 else res[:2]
        cube = cubing.regrid_spatial(cube, lat_grid(lat_res), lon_grid(lon_res), args.method)
    if args.time_step is not None:
        tdim = cube.schema.time_dim
        if tdim is None:
            raise CLIError("cube has no time dimension to aggregate")
        t = cube.grid(tdim).coordinates
        n = (int(t[-1]) - int(t[0])) // args.time_step + 1
        target = Grid(tdim, int(t[0]) + args.time_step * np.arange(n, dtype=np.int64), DimKind.TEMPORAL)
        cube = cubing.aggregate_temporal(cube, target, args.reducer)
    _write(cube, args)


def cmd_regularise(args) -> None:
    _write(harmonise.regularise_time(store.open_cube(args.input), args.step_days), args)


def cmd_gapfill(args) -> None:
    _write(harmonise.gapfill_linear(store.open_cube(args.input), args.max_gap), args)


def cmd_anomaly(args) -> None:
    cube = store.open_cube(args.input)
    clim = harmonise.climatology(cube, args.clim_window)
    if args.clim_out:
        _write(clim, args, args.clim_out)
    _write(harmonise.anomalies(cube, clim), args)


def cmd_decompose(args) -> None:
    _write(harmonise.decompose(store.open_cube(args.input), args.trend_window), args)


def cmd_expr(args) -> None:
    _write(harmonise.evaluate_expression(store.open_cube(args.input), args.formula, args.name), args)


def cmd_stats(args) -> None:
    cube = store.open_cube(args.input)
    over = args.over or cube.dims
    weights = None
    if args.weighted:
        lat = cube.schema.lat_dim
        if lat is None:
            raise CLIError("--weighted needs a latitude dimension")
        weights = stats.area_weights(cube.grid(lat))
    out = stats.weighted_reduce_over(cube, over, weights, statistics=args.stat, workers=args.workers)
    if args.out:
        store.write_cube(out, args.out, compression=args.compression, overwrite=args.overwrite, workers=args.workers)
    print_values(out)


def _label(grid, i) -> str:
    c = grid.coordinates[i]
    return iso_date(int(c)) if grid.kind == DimKind.TEMPORAL else str(c)


def print_values(cube: DataCube, limit: int = 1000) -> None:
    """One ``var[dim=coord,...]: value`` line per cell (small results only)."""
    size = int(np.prod(cube.shape)) if cube.dims else 1
    if size > limit:
        print(f"result dimensions: {', '.join(f'{d}={n}' for d, n in zip(cube.dims, cube.shape))}")
        return
    grids = cube.schema.grids
    for v in cube.variables:
        vals = cube.values(v)
        for idx in np.ndindex(*cube.shape):
            where = ",".join(f"{g.name}={_label(g, i)}" for g, i in zip(grids, idx))
            print(f"{v}[{where}]: {float(vals[idx]):.6f}" if where else f"{v}: {float(vals[idx]):.6f}")


def cmd_detect_events(args) -> None:
    cube = store.open_cube(args.input)
    events = sampling.detect_extreme_events(
        cube, args.z, args.min_size, args.connectivity, variable=args.variable, method=args.standardise
    )
    sampling.write_report(events, args.out)
    print(f"{len(events)} event(s)")


def _landcover(args, cube):
    ny, nx = len(cube.grid(cube.schema.lat_dim)), len(cube.grid(cube.schema.lon_dim))
    if not args.landcover:
        return np.zeros((ny, nx))
    lc = store.open_cube(args.landcover)
    vals = lc.values(lc.variables[0])
    if vals.ndim == 3:
        vals = vals[0]
    return vals


def cmd_sample(args) -> None:
    cube = store.open_cube(args.input)
    if args.n is not None:
        ydim, xdim = cube.schema.lat_dim, cube.schema.lon_dim
        if ydim is None or xdim is None:
            raise CLIError("point sampling needs lat and lon dimensions")
        v = args.variable or cube.variables[0]
        vals = np.moveaxis(cube.values(v), [cube.axis(ydim), cube.axis(xdim)], [0, 1])
        mask = ~np.isnan(vals.reshape(vals.shape[0], vals.shape[1], -1)).all(axis=2)
        w = stats.area_weights(cube.grid(ydim), cube.grid(xdim))
        idx = sampling.weighted_sample_points(mask, w, args.n, args.seed)
        lat, lon = cube.grid(ydim).coordinates, cube.grid(xdim).coordinates
        recs = [sampling.SamplePoint((y, x), {ydim: float(lat[y]), xdim: float(lon[x])}) for y, x in idx]
        sampling.write_report(recs, args.out)
    else:
        if not args.events:
            raise CLIError("--per-event needs --events")
        events = [sampling.EventRecord.from_dict(d) for d in sampling.read_report(args.events)]
        specs = sampling.sample_minicubes(
            cube, events, args.window, args.time_pad, _landcover(args, cube),
            args.purity, args.per_event, args.seed,
        )
        sampling.write_report(specs, args.out)
    print(f"wrote {args.out}")


def cmd_cv_folds(args) -> None:
    pts = [sampling.SamplePoint.from_dict(d) for d in sampling.read_report(args.input)]
    fa = sampling.block_cv_folds(pts, args.block, args.k, args.buffer, args.seed)
    sampling.write_report(fa.to_records(), args.out)
    for f in range(args.k):
        print(f"fold {f}: test={fa.test(f).size} train={fa.train(f).size} excluded={fa.excluded(f).size}")


def cmd_render(args) -> None:
    cube = store.open_cube(args.input)
    v = args.variable or cube.variables[0]
    render_face(cube, v, args.face, args.at, args.out)


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esdc", description="Earth system data cube toolkit")
    p.add_argument("--workers", type=int, default=1, help="worker threads for parallel operations")
    p.add_argument("--fixed-time", metavar="ISO", help="freeze provenance timestamps (reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    def cube_out(sp):
        sp.add_argument("--compression", choices=store.COMPRESSIONS, default="none")
        sp.add_argument("--overwrite", action="store_true")

    def transform(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("input")
        sp.add_argument("output")
        cube_out(sp)
        sp.set_defaults(func=func)
        return sp

    sp = sub.add_parser("create", help="create a cube from a synthetic preset or a CSV file")
    sp.add_argument("output")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--from-csv", metavar="CSV")
    sp.add_argument("--shape", type=_ints, help="time,lat,lon sizes")
    sp.add_argument("--chunks", type=_ints)
    sp.add_argument("--seed", type=int, default=0)
    cube_out(sp)
    sp.set_defaults(func=cmd_create)

    sp = sub.add_parser("info", help="describe a cube")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_info)

    sp = transform("resample", cmd_resample, "regrid lat/lon and/or aggregate time")
    sp.add_argument("--target-grid", type=_floats, metavar="RES[,RES]", help="global target resolution in degrees")
    sp.add_argument("--method", choices=[m.value for m in cubing.RegridMethod], default="conservative")
    sp.add_argument("--time-step", type=int, metavar="DAYS")
    sp.add_argument("--reducer", choices=("mean", "median", "count"), default="mean")

    sp = transform("regularise", cmd_regularise, "resample onto a regular time axis")
    sp.add_argument("--step-days", type=int, default=1)

    sp = transform("gapfill", cmd_gapfill, "linear gap filling along time")
    sp.add_argument("--max-gap", type=int, required=True)

    sp = transform("anomaly", cmd_anomaly, "subtract the day-of-year climatology")
    sp.add_argument("--clim-window", type=int, default=1)
    sp.add_argument("--clim-out", metavar="PATH")

    sp = transform("decompose", cmd_decompose, "trend/seasonal/residual decomposition")
    sp.add_argument("--trend-window", type=int, required=True)

    sp = transform("expr", cmd_expr, "add a variable computed from an expression")
    sp.add_argument("--formula", required=True)
    sp.add_argument("--name", required=True)

    sp = sub.add_parser("stats", help="reduce dimensions with (area-)weighted statistics")
    sp.add_argument("input")
    sp.add_argument("--over", type=_names, help="comma-separated dimensions (default: all)")
    sp.add_argument("--weighted", action="store_true", help="spherical area weights")
    sp.add_argument("--stat", type=_names, default=("mean",), help=f"any of {','.join(stats.STATISTICS)}")
    sp.add_argument("--out", metavar="PATH")
    cube_out(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("detect-events", help="label extreme anomaly events")
    sp.add_argument("input")
    sp.add_argument("--z", type=float, required=True)
    sp.add_argument("--min-size", type=int, default=1)
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
    sp.add_argument("--variable")
    sp.add_argument("--standardise", choices=("clipped", "plain"), default="clipped",
                    help="background statistics for z-scores")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect_events)

    sp = sub.add_parser("sample", help="weighted point sampling or event mini cubes")
    sp.add_argument("input")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--n", type=int, help="number of area-weighted points")
    mode.add_argument("--per-event", type=int, help="mini cubes per event")
    sp.add_argument("--events", metavar="REPORT")
    sp.add_argument("--window", type=int, default=3)
    sp.add_argument("--time-pad", type=int, default=0)
    sp.add_argument("--purity", type=float, default=0.0)
    sp.add_argument("--landcover", metavar="CUBE")
    sp.add_argument("--variable")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("cv-folds", help="buffered spatial block cross-validation folds")
    sp.add_argument("input", help="point report written by 'sample --n'")
    sp.add_argument("--block", type=float, required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--buffer", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cv_folds)

    sp = sub.add_parser("render", help="write a map or Hovmoeller face as PGM")
    sp.add_argument("input")
    sp.add_argument("--face", choices=("map", "hovmoeller"), required=True)
    sp.add_argument("--at", type=int, required=True)
    sp.add_argument("--variable")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.workers < 1:
        print("esdc: error: --workers must be >= 1", file=sys.stderr)
        return 2
    if args.fixed_time:
        set_fixed_time(args.fixed_time)
    try:
        args.func(args)
    except CLIError as exc:
        print(f"esdc: error: {exc}", file=sys.stderr)
        return 2
    except (ESDCError, OSError, json.JSONDecodeError) as exc:
        print(f"esdc: error: {exc}", file=sys.stderr)
        return 1
    finally:
        set_fixed_time(None)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
