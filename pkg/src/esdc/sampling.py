"""Sampling training and evaluation data from cubes.

Area-weighted point sampling, chunk-coalesced batch reads, buffered spatial
block cross-validation, extreme-event detection and event-driven mini-cube
extraction with land-cover purity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import (
    FewerBlocksThanFolds,
    NonAnomalyInput,
    NotEnoughEligibleCells,
    ValidationError,
    WindowExceedsDomain,
)
from .model import DataCube, DimKind, iso_date

TRAIN, TEST, EXCLUDED = 0, 1, 2


@dataclass(frozen=True)
class SamplePoint:
    """A cell addressed by per-dimension indices, with resolved coordinates."""

    indices: Tuple[int, ...]
    coords: Dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {"indices": list(self.indices), "coords": dict(self.coords)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(i) for i in d["indices"]), dict(d.get("coords", {})))


def points_for(cube: DataCube, indices: Iterable[Sequence[int]]) -> List[SamplePoint]:
    """Wrap index tuples as points with the cube's coordinates resolved."""
    out = []
    grids = cube.schema.grids
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        for i, n in zip(idx, cube.shape):
            if not 0 <= i < n:
                raise ValidationError(f"point {idx} outside cube shape {cube.shape}")
        coords = {}
        for g, i in zip(grids, idx):
            c = g.coordinates[i]
            coords[g.name] = c.item() if hasattr(c, "item") else c
        out.append(SamplePoint(idx, coords))
    return out


# -- weighted sampling -------------------------------------------------------


def weighted_sample_points(mask, weights, n: int, seed: int) -> List[Tuple[int, ...]]:
    """Draw ``n`` distinct cells without replacement, proportional to weight.

    Uses exponential keys: each eligible cell gets ``log(u) / w`` (the log of
    ``u ** (1/w)``) and the ``n`` largest keys win.  ``weights`` may be an
    :class:`~esdc.stats.AreaWeights` or any array broadcastable to ``mask``.
    Returns index tuples ordered by decreasing key.
    """
    mask = np.asarray(mask, dtype=bool)
    if hasattr(weights, "cells"):
        weights = weights.cells()
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), mask.shape)
    eligible = mask & (w > 0) & np.isfinite(w)
    flat = np.flatnonzero(eligible)
    if n > flat.size:
        raise NotEnoughEligibleCells(f"requested {n} points but only {flat.size} cells are eligible")
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(mask.size)  # in (0, 1]
    keys = np.log(u[flat]) / w.reshape(-1)[flat]
    top = np.argsort(-keys, kind="stable")[:n]
    return [tuple(int(i) for i in np.unravel_index(flat[j], mask.shape)) for j in top]


# -- coalesced reads -------------------------------------------------------


@dataclass
class ReadPlan:
    """Per-chunk grouping of one batch.

    ``entries`` holds ``(chunk_key, offsets, positions)``: in-chunk offsets of
    the points that fall into the chunk and their positions in the batch.
    """

    entries: List[Tuple[Tuple[int, ...], np.ndarray, np.ndarray]]
    size: int

    def __len__(self):
        return len(self.entries)

    @property
    def order(self) -> np.ndarray:
        """Permutation from plan emission order back to batch order."""
        return np.concatenate([p for _, _, p in self.entries]) if self.entries else np.zeros(0, np.int64)


@dataclass
class Batch:
    """Indices into the original point list, in batch order."""

    members: np.ndarray
    points: np.ndarray


def plan_reads(points: np.ndarray, chunks: Sequence[int]) -> ReadPlan:
    pts = np.asarray(points, dtype=np.int64).reshape(len(points), -1)
    ch = np.asarray(chunks, dtype=np.int64)
    keys = pts // ch
    entries = []
    if len(pts):
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
        # chunks in order of first appearance in the batch
        for j in np.argsort(order[bounds[:-1]], kind="stable"):
            key = uniq[j]
            pos = order[bounds[j]: bounds[j + 1]]
            entries.append((tuple(int(k) for k in key), pts[pos] - key * ch, pos))
    return ReadPlan(entries, len(pts))


def coalesced_batches(
    points, chunks: Sequence[int], batch_size: int, seed: int, chunk_aligned: bool = False
) -> List[Tuple[Batch, ReadPlan]]:
    """Shuffle points, split them into batches and plan per-chunk reads.

    With ``chunk_aligned`` the shuffled points are grouped by chunk (chunks
    visited in a seeded random order) before batching, so consecutive batches
    share at most one chunk and :class:`ChunkReader` reads each chunk once per
    epoch.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    pts = np.array([p.indices if isinstance(p, SamplePoint) else p for p in points], dtype=np.int64)
    pts = pts.reshape(len(pts), -1) if len(pts) else pts.reshape(0, len(chunks))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pts))
    if chunk_aligned and len(pts):
        keys = pts[perm] // np.asarray(chunks, dtype=np.int64)
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        rank = rng.permutation(inverse.max() + 1)
        perm = perm[np.argsort(rank[inverse], kind="stable")]
    out = []
    for s in range(0, len(pts), batch_size):
        members = perm[s: s + batch_size]
        bp = pts[members]
        out.append((Batch(members, bp), plan_reads(bp, chunks)))
    return out


class ChunkReader:
    """Executes read plans against an array backend exposing ``read_chunk``.

    The most recently decoded chunk is kept, so a chunk spanning the boundary
    of two chunk-aligned batches is decoded once.
    """

    def __init__(self, array):
        self.array = array
        self._key = None
        self._chunk = None
        self.reads = 0

    def chunk(self, key):
        if key != self._key:
            self._chunk = self.array.read_chunk(key)
            self._key = key
            self.reads += 1
        return self._chunk

    def execute(self, plan: ReadPlan) -> np.ndarray:
        """Values of the batch, in batch order."""
        out = np.empty(plan.size)
        for key, offsets, pos in plan.entries:
            c = self.chunk(key)
            out[pos] = c[tuple(offsets.T)]
        return out


def read_points_naive(array, points) -> np.ndarray:
    """One window read per point; the baseline coalescing is compared with."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        idx = p.indices if isinstance(p, SamplePoint) else tuple(int(x) for x in p)
        out[i] = array.read(idx, (1,) * len(idx)).reshape(())
    return out


# -- block cross-validation ----------------------------------------------


@dataclass
class FoldAssignment:
    """Fold id per point and role per (point, fold)."""

    fold: np.ndarray
    roles: np.ndarray
    k: int

    def test(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.roles[:, f] == TEST)

    def train(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.roles[:, f] == TRAIN)

    def excluded(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.roles[:, f] == EXCLUDED)

    def to_records(self):
        names = {TRAIN: "train", TEST: "test", EXCLUDED: "excluded"}
        return [
            {"point": i, "fold": int(self.fold[i]), "roles": [names[int(r)] for r in self.roles[i]]}
            for i in range(len(self.fold))
        ]


def _latlon(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rows = []
    for p in points:
        if isinstance(p, SamplePoint):
            lat = next(v for k, v in p.coords.items() if k.lower().startswith("lat"))
            lon = next(v for k, v in p.coords.items() if k.lower().startswith("lon"))
            rows.append((lat, lon))
        else:
            rows.append(tuple(p))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def pair_distance(lat1, lon1, lat2, lon2):
    """Equirectangular distance in degrees, longitude scaled by cos(mean latitude)."""
    dlat = lat1 - lat2
    dlon = (lon1 - lon2 + 180.0) % 360.0 - 180.0
    return np.hypot(dlat, dlon * np.cos(np.radians((lat1 + lat2) / 2.0)))


def block_cv_folds(points, block_size_deg: float, k: int, buffer_deg: float, seed: int) -> FoldAssignment:
    """Spatial block k-fold assignment with a buffer zone around test points.

    Points are ``(lat, lon)`` rows or :class:`SamplePoint` objects with lat/lon
    coordinates.  Occupied blocks are shuffled by ``seed`` and dealt to folds
    round-robin.  A training point strictly closer than ``buffer_deg`` to any
    test point of a fold is excluded from that fold.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    if block_size_deg <= 0:
        raise ValidationError("block size must be positive")
    if buffer_deg < 0:
        raise ValidationError("buffer must be >= 0")
    ll = _latlon(points)
    lat, lon = ll[:, 0], (ll[:, 1] + 180.0) % 360.0 - 180.0
    bi = np.floor((lat + 90.0) / block_size_deg).astype(np.int64)
    bj = np.floor((lon + 180.0) / block_size_deg).astype(np.int64)
    blocks, inverse = np.unique(np.stack([bi, bj], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(blocks) < k:
        raise FewerBlocksThanFolds(f"{len(blocks)} occupied blocks cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    block_fold = np.empty(len(blocks), dtype=np.int64)
    block_fold[rng.permutation(len(blocks))] = np.arange(len(blocks)) % k
    fold = block_fold[inverse]
    roles = np.full((len(fold), k), TRAIN, dtype=np.int8)
    for f in range(k):
        test = np.flatnonzero(fold == f)
        roles[test, f] = TEST
        if buffer_deg <= 0:
            continue
        train = np.flatnonzero(fold != f)
        near = np.zeros(train.size, dtype=bool)
        step = max(1, 2_000_000 // max(test.size, 1))
        for s in range(0, train.size, step):
            tr = train[s: s + step]
            d = pair_distance(lat[tr, None], lon[tr, None], lat[None, test], lon[None, test])
            near[s: s + step] = (d < buffer_deg).any(axis=1)
        roles[train[near], f] = EXCLUDED
    return FoldAssignment(fold, roles, k)


# -- extreme events ------------------------------------------------------


@dataclass
class EventRecord:
    label: int
    start_index: int
    end_index: int
    start_time: str
    end_time: str
    duration: int
    bbox: Tuple[int, int, int, int, int, int]  # t0, t1, y0, y1, x0, x1 (inclusive)
    cell_count: int
    mean_abs_anomaly: float
    max_abs_anomaly: float
    members: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self, members: bool = True):
        d = {k: v for k, v in asdict(self).items() if k != "members"}
        d["bbox"] = list(self.bbox)
        d["kind"] = "event"
        if members and self.members is not None:
            d["members"] = self.members.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {k: d[k] for k in (
            "label", "start_index", "end_index", "start_time", "end_time", "duration",
            "cell_count", "mean_abs_anomaly", "max_abs_anomaly")}
        m = np.asarray(d["members"], dtype=np.int64).reshape(-1, 3) if "members" in d else None
        return cls(bbox=tuple(d["bbox"]), members=m, **kw)


def _event_axes(cube: DataCube):
    t, y, x = cube.schema.time_dim, cube.schema.lat_dim, cube.schema.lon_dim
    if t is None or y is None or x is None or len(cube.dims) != 3:
        raise ValidationError("event detection needs a (time, lat, lon) cube")
    return t, y, x


def standardise(values: np.ndarray, method: str = "clipped", kappa: float = 3.5, max_iter: int = 50) -> np.ndarray:
    """Per-cell z-scores along axis 0.

    ``plain`` uses the mean and standard deviation of the whole series.
    ``clipped`` estimates them from the background only: starting from the
    median and 1.4826 * MAD, values further than ``kappa`` scale units from
    the centre are set aside and mean/std recomputed on the rest until the
    retained set stops changing.  Cells with zero spread get NaN and are
    never foreground.
    """
    v = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        if method == "plain":
            centre, scale = np.nanmean(v, axis=0), np.nanstd(v, axis=0)
        elif method == "clipped":
            centre = np.nanmedian(v, axis=0)
            scale = 1.4826 * np.nanmedian(np.abs(v - centre), axis=0)
            scale = np.where(scale > 0, scale, np.nanstd(v, axis=0))
            keep = ~np.isnan(v)
            for _ in range(max_iter):
                new = ~np.isnan(v) & (np.abs(v - centre) <= kappa * scale)
                if np.array_equal(new, keep):
                    break
                keep = new
                n = keep.sum(axis=0)
                centre = np.where(n > 0, np.where(keep, v, 0.0).sum(axis=0) / np.maximum(n, 1), np.nan)
                dev = np.where(keep, v - centre, 0.0)
                scale = np.where(n > 0, np.sqrt((dev * dev).sum(axis=0) / np.maximum(n, 1)), np.nan)
        else:
            raise ValidationError(f"unknown standardisation {method!r}")
        scale = np.where(scale > 0, scale, np.nan)
        return (v - centre) / scale


def foreground_mask(cube: DataCube, z_threshold: float, variable: Optional[str] = None, method: str = "clipped"):
    _event_axes(cube)
    if variable is None:
        if len(cube.variables) != 1:
            raise ValidationError("event detection needs a single variable; pass variable=")
        variable = cube.variables[0]
    if cube.attrs.variable(variable).get("anomaly") != "true":
        raise NonAnomalyInput(f"variable {variable!r} is not marked as an anomaly")
    vals = cube.values(variable)
    z = standardise(vals, method)
    with np.errstate(invalid="ignore"):
        return np.abs(z) > z_threshold, vals


def detect_extreme_events(
    cube: DataCube,
    z_threshold: float,
    min_size: int = 1,
    connectivity: int = 6,
    variable: Optional[str] = None,
    method: str = "clipped",
) -> List[EventRecord]:
    """Connected regions of extreme standardised anomalies in (time, y, x).

    Records are ordered by start time, then bounding-box origin, and
    labelled 1..n in that order.  Intensities are absolute anomaly values
    averaged and maximised over member cells.
    """
    if connectivity not in (6, 26):
        raise ValidationError("connectivity must be 6 or 26")
    mask, vals = foreground_mask(cube, z_threshold, variable, method)
    labels, n = kernels.label3d(np.ascontiguousarray(mask, dtype=np.uint8), connectivity)
    if n == 0:
        return []
    flat = labels.reshape(-1)
    cells = np.flatnonzero(flat)  # C order
    lab = flat[cells]
    order = np.argsort(lab, kind="stable")
    cells, lab = cells[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    tc = cube.grid(cube.dims[0]).coordinates
    absval = np.abs(vals.reshape(-1))
    records = []
    for j in range(n):
        members = cells[bounds[j]: bounds[j + 1]]
        if members.size < min_size:
            continue
        tyx = np.stack(np.unravel_index(members, labels.shape), axis=1)
        lo, hi = tyx.min(axis=0), tyx.max(axis=0)
        a = absval[members]
        records.append(EventRecord(
            label=0,
            start_index=int(lo[0]),
            end_index=int(hi[0]),
            start_time=iso_date(int(tc[lo[0]])),
            end_time=iso_date(int(tc[hi[0]])),
            duration=int(hi[0] - lo[0] + 1),
            bbox=(int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]), int(lo[2]), int(hi[2])),
            cell_count=int(members.size),
            mean_abs_anomaly=float(a.mean()),
            max_abs_anomaly=float(a.max()),
            members=tyx,
        ))
    records.sort(key=lambda r: (r.bbox[0], r.bbox[2], r.bbox[4], tuple(r.members[0])))
    for i, r in enumerate(records, start=1):
        r.label = i
    return records


# -- mini cubes ----------------------------------------------------------


@dataclass
class MiniCubeSpec:
    event_label: int
    center: Tuple[int, int]
    center_coords: Tuple[float, float]
    spatial_window: int
    time_range: Tuple[int, int]  # inclusive indices
    dominant_class: int
    purity: float

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        d["center_coords"] = list(self.center_coords)
        d["time_range"] = list(self.time_range)
        d["kind"] = "minicube"
        return d

    def ranges(self, cube: DataCube) -> Dict[str, slice]:
        """Index ranges selecting the mini cube via :func:`esdc.model.subset`."""
        t, y, x = _event_axes(cube)
        h = self.spatial_window // 2
        cy, cx = self.center
        return {
            t: slice(self.time_range[0], self.time_range[1] + 1),
            y: slice(cy - h, cy + h + 1),
            x: slice(cx - h, cx + h + 1),
        }

    def extract(self, cube: DataCube) -> DataCube:
        from .model import subset

        return subset(cube, self.ranges(cube))


def window_purity(landcover: np.ndarray, cy: int, cx: int, h: int):
    """Dominant class (smallest id on ties) and its share of non-NA cells."""
    win = np.asarray(landcover[cy - h: cy + h + 1, cx - h: cx + h + 1], dtype=np.float64)
    win = win[~np.isnan(win)]
    if win.size == 0:
        return None, 0.0
    classes, counts = np.unique(win, return_counts=True)
    j = int(np.argmax(counts))
    return int(classes[j]), counts[j] / win.size


def _landcover_array(landcover, ny, nx):
    if isinstance(landcover, DataCube):
        v = landcover.variables[0]
        landcover = landcover.values(v)
    lc = np.asarray(landcover, dtype=np.float64)
    if lc.shape != (ny, nx):
        raise ValidationError(f"land cover shape {lc.shape} does not match the spatial grid {(ny, nx)}")
    return lc


def sample_minicubes(
    cube: DataCube,
    events: Sequence[EventRecord],
    spatial_window: int,
    time_pad: int,
    landcover,
    purity_threshold: float,
    per_event: int,
    seed: int,
    extra_points: Sequence[Tuple[int, int, int]] = (),
) -> List[MiniCubeSpec]:
    """Event-centred mini cubes filtered by land-cover purity.

    Centers are drawn uniformly without replacement from the distinct
    spatial cells of each event's members; centers whose window leaves the
    domain are skipped.  ``extra_points`` are ``(t, y, x)`` indices added as
    single-cell pseudo events (label 0), e.g. to rebalance rare classes.
    """
    if spatial_window < 1 or spatial_window % 2 == 0:
        raise ValidationError("spatial_window must be a positive odd integer")
    if time_pad < 0 or per_event < 0:
        raise ValidationError("time_pad and per_event must be >= 0")
    tdim, ydim, xdim = _event_axes(cube)
    nt, ny, nx = cube.shape
    lc = _landcover_array(landcover, ny, nx)
    h = spatial_window // 2
    lat = cube.grid(ydim).coordinates
    lon = cube.grid(xdim).coordinates
    groups = [(e.label, e.start_index, e.end_index, e.members) for e in events]
    groups += [(0, int(t), int(t), np.array([[t, y, x]], dtype=np.int64)) for t, y, x in extra_points]
    rng = np.random.default_rng(seed)
    specs = []
    any_valid = not groups
    for label, t0, t1, members in groups:
        yx = np.unique(np.asarray(members)[:, 1:], axis=0)
        ok = (yx[:, 0] >= h) & (yx[:, 0] < ny - h) & (yx[:, 1] >= h) & (yx[:, 1] < nx - h)
        cand = yx[ok]
        if cand.size == 0:
            continue
        any_valid = True
        pick = rng.choice(len(cand), size=min(per_event, len(cand)), replace=False)
        tr = (max(0, t0 - time_pad), min(nt - 1, t1 + time_pad))
        for j in pick:
            cy, cx = (int(v) for v in cand[j])
            dom, purity = window_purity(lc, cy, cx, h)
            if dom is None or purity < purity_threshold:
                continue
            specs.append(MiniCubeSpec(
                int(label), (cy, cx), (float(lat[cy]), float(lon[cx])), spatial_window, tr, dom, float(purity)
            ))
    if not any_valid:
        raise WindowExceedsDomain(f"no event has a center whose {spatial_window}-cell window fits the domain")
    return specs


# -- reports ---------------------------------------------------------------


def dumps_record(d) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def write_report(records, path) -> None:
    """Line-delimited JSON, one object per record, keys sorted."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_record(r.to_dict() if hasattr(r, "to_dict") else r) + "\n")


def read_report(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
