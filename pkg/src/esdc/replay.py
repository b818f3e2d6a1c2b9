"""Re-run recorded provenance.

Each history line names an operation and its canonical parameters.  For the
single-input operations registered here, :func:`replay` re-applies the
lines a derived cube carries beyond its source and, with timestamps restored
from the records, rebuilds the derived cube bit for bit.
"""

from __future__ import annotations

from typing import Callable, Dict, List

from . import cubing, harmonise, model, stats
from .errors import ValidationError
from .model import DataCube, Grid, DimKind, ProvenanceRecord, set_fixed_time, subset


def _ranges(params):
    out = {}
    for k, v in params["ranges"].items():
        if isinstance(v, dict) and "slice" in v:
            out[k] = slice(*v["slice"])
        elif isinstance(v, list) and len(v) == 2 and not all(isinstance(x, str) for x in v):
            out[k] = tuple(v)
        else:
            out[k] = v
    return out


def _regrid(cube, p):
    lat = cubing.grid_from_params(cube.schema.lat_dim, p["lat"])
    lon = cubing.grid_from_params(cube.schema.lon_dim, p["lon"])
    return cubing.regrid_spatial(cube, lat, lon, p["method"])


def _aggregate(cube, p):
    target = Grid(cube.schema.time_dim, p["time"], DimKind.TEMPORAL)
    return cubing.aggregate_temporal(cube, target, p["reducer"], p["min_count"])


def _anomalies(cube, p):
    window = int(p["smoothing_window"]) if p.get("smoothing_window") else 1
    return harmonise.anomalies(cube, harmonise.climatology(cube, window))


def _reduce(cube, p):
    weights = None
    if p.get("weighted"):
        weights = stats.area_weights(cube.grid(cube.schema.lat_dim))
    return stats.weighted_reduce_over(cube, p["dims"], weights, p["statistics"])


OPERATIONS: Dict[str, Callable[[DataCube, dict], DataCube]] = {
    "subset": lambda c, p: subset(c, _ranges(p)),
    "regrid_spatial": _regrid,
    "aggregate_temporal": _aggregate,
    "regularise_time": lambda c, p: harmonise.regularise_time(c, p["step_days"]),
    "gapfill_linear": lambda c, p: harmonise.gapfill_linear(c, p["max_gap"]),
    "climatology": lambda c, p: harmonise.climatology(c, p["smoothing_window"]),
    "anomalies": _anomalies,
    "decompose": lambda c, p: harmonise.decompose(c, p["trend_window"]),
    "evaluate_expression": lambda c, p: harmonise.evaluate_expression(c, p["expression"], p["name"]),
    "weighted_reduce_over": _reduce,
}


def pending_records(source: DataCube, derived: DataCube) -> List[ProvenanceRecord]:
    """History lines of ``derived`` that ``source`` does not have."""
    a, b = source.attrs.history_lines(), derived.attrs.history_lines()
    if b[: len(a)] != a:
        raise ValidationError("derived cube's history does not extend the source history")
    return [ProvenanceRecord.parse(line) for line in b[len(a):]]


def replay(source: DataCube, records: List[ProvenanceRecord]) -> DataCube:
    """Apply ``records`` to ``source`` in order, reusing their timestamps."""
    cube = source
    previous = model._fixed_time
    try:
        for rec in records:
            op = OPERATIONS.get(rec.operation)
            if op is None:
                raise ValidationError(f"operation {rec.operation!r} cannot be replayed")
            set_fixed_time(rec.timestamp)
            cube = op(cube, rec.params)
    finally:
        set_fixed_time(previous)
    return cube
