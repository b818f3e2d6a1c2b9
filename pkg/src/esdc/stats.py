"""Weighted streaming statistics on the sphere.

Accumulators keep O(1) state per output cell and merge exactly like
concatenated streams, so per-chunk partial results can be combined in any
fixed order.  Weights enter only as ratios; the running weight total is
Kahan-compensated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import kernels
from .errors import FewerThanTwoComplete, IrregularLatGrid, NonPositiveWeight, UnknownDimension
from .model import DataCube, Grid, _spacing_regular, stamp

STATISTICS = ("mean", "var", "std", "count", "min", "max", "sum", "weight")


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@dataclass
class WeightedMoments:
    """Running weighted mean / variance / extrema of a scalar stream.

    The mean is carried as the unevaluated sum ``mean_hi + mean_c``, so the
    deviations feeding ``m2`` stay exact even for data far from zero (a
    stream offset by 1e9 loses nothing to cancellation).
    """

    wsum: float = 0.0
    mean_hi: float = 0.0
    m2: float = 0.0
    count: int = 0
    min: float = math.inf
    max: float = -math.inf
    comp: float = 0.0
    mean_c: float = 0.0

    @property
    def weight(self) -> float:
        return self.wsum - self.comp

    @property
    def mean(self) -> float:
        return self.mean_hi + self.mean_c

    def accumulate(self, x: float, w: float = 1.0) -> "WeightedMoments":
        if not w > 0:
            raise NonPositiveWeight(f"weight must be positive, got {w}")
        x = float(x)
        if x != x:
            return self
        y = w - self.comp
        t = self.wsum + y
        self.comp = (t - self.wsum) - y
        self.wsum = t
        total = t - self.comp
        delta = (x - self.mean_hi) - self.mean_c
        s, e = _two_sum(self.mean_hi, (w / total) * delta)
        self.mean_c += e
        self.mean_hi = s
        self.m2 += w * delta * ((x - self.mean_hi) - self.mean_c)
        if self.count == 0:
            self.min = self.max = x
        else:
            self.min = min(self.min, x)
            self.max = max(self.max, x)
        self.count += 1
        return self

    def accumulate_array(self, values, weights=None) -> "WeightedMoments":
        """Stream an array in C order (NaNs skipped) through the compiled kernel."""
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if weights is None:
            weights = np.ones_like(values)
        else:
            weights = np.ascontiguousarray(np.broadcast_to(weights, values.shape), dtype=np.float64).ravel()
            if np.any(weights[~np.isnan(values)] <= 0):
                raise NonPositiveWeight("all weights of non-NA values must be positive")
        state = MomentsArray(1)
        state.load(0, self)
        state.accumulate(values, weights, np.zeros(values.size, dtype=np.intp))
        state.store(0, self)
        return self

    def merge(self, other: "WeightedMoments") -> "WeightedMoments":
        """Return the accumulator of the concatenated streams (self first)."""
        if other.count == 0:
            return WeightedMoments(**self.__dict__)
        if self.count == 0:
            return WeightedMoments(**other.__dict__)
        wa, wb = self.weight, other.weight
        s, e = _two_sum(self.wsum, other.wsum)
        comp = self.comp + other.comp - e
        w = s - comp
        delta = (other.mean_hi - self.mean_hi) + (other.mean_c - self.mean_c)
        hi, err = _two_sum(self.mean_hi, delta * (wb / w))
        m2 = self.m2 + other.m2 + (wa * wb / w) * delta * delta
        return WeightedMoments(
            s, hi, m2, self.count + other.count, min(self.min, other.min), max(self.max, other.max), comp,
            self.mean_c + err,
        )

    __add__ = merge

    def finalize(self) -> Dict[str, float]:
        if self.count == 0:
            nan = float("nan")
            return dict(mean=nan, var=nan, std=nan, count=0, min=nan, max=nan, sum=nan, weight=0.0)
        var = max(self.m2, 0.0) / self.weight
        return dict(
            mean=self.mean,
            var=var,
            std=math.sqrt(var),
            count=self.count,
            min=self.min,
            max=self.max,
            sum=self.mean * self.weight,
            weight=self.weight,
        )


def moments_accumulate(acc: WeightedMoments, x: float, w: float = 1.0) -> WeightedMoments:
    return acc.accumulate(x, w)


def moments_merge(a: WeightedMoments, b: WeightedMoments) -> WeightedMoments:
    return a.merge(b)


class MomentsArray:
    """A flat array of independent :class:`WeightedMoments` accumulators."""

    _FIELDS = ("wsum", "comp", "mean_hi", "mean_c", "m2", "count", "min", "max")

    def __init__(self, n: int):
        self.n = int(n)
        self.wsum = np.zeros(n)
        self.comp = np.zeros(n)
        self.mean_hi = np.zeros(n)
        self.mean_c = np.zeros(n)
        self.m2 = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.min = np.full(n, np.inf)
        self.max = np.full(n, -np.inf)

    def load(self, i, acc: WeightedMoments):
        for f in self._FIELDS:
            getattr(self, f)[i] = getattr(acc, f)

    def store(self, i, acc: WeightedMoments):
        for f in self._FIELDS:
            setattr(acc, f, getattr(self, f)[i].item())

    def get(self, i) -> WeightedMoments:
        acc = WeightedMoments()
        self.store(i, acc)
        return acc

    def accumulate(self, values, weights, groups):
        """Stream flat ``values`` (C order) into accumulators ``groups``."""
        kernels.moments_update(
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(weights, dtype=np.float64),
            np.ascontiguousarray(groups, dtype=np.intp),
            self.wsum, self.comp, self.mean_hi, self.mean_c, self.m2, self.count, self.min, self.max,
        )
        return self

    def merge(self, other: "MomentsArray", at=None):
        """Merge ``other`` into the accumulators at flat positions ``at`` (default: all)."""
        idx = np.arange(self.n) if at is None else np.asarray(at, dtype=np.intp)
        a_empty = self.count[idx] == 0
        b_empty = other.count == 0
        wa = self.wsum[idx] - self.comp[idx]
        wb = other.wsum - other.comp
        s, e = _two_sum(self.wsum[idx], other.wsum)
        comp = self.comp[idx] + other.comp - e
        w = s - comp
        with np.errstate(invalid="ignore", divide="ignore"):
            delta = (other.mean_hi - self.mean_hi[idx]) + (other.mean_c - self.mean_c[idx])
            hi, err = _two_sum(self.mean_hi[idx], delta * (wb / w))
            m2 = self.m2[idx] + other.m2 + (wa * wb / w) * delta * delta
        mc = self.mean_c[idx] + err
        both = ~a_empty & ~b_empty
        take_b = a_empty & ~b_empty
        for name, merged in (("wsum", s), ("comp", comp), ("mean_hi", hi), ("mean_c", mc), ("m2", m2)):
            cur = getattr(self, name)
            cur[idx[both]] = merged[both]
            cur[idx[take_b]] = getattr(other, name)[take_b]
        self.count[idx] += other.count
        self.min[idx] = np.minimum(self.min[idx], other.min)
        self.max[idx] = np.maximum(self.max[idx], other.max)
        return self

    def finalize(self) -> Dict[str, np.ndarray]:
        empty = self.count == 0
        w = self.wsum - self.comp
        mean = self.mean_hi + self.mean_c
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.maximum(self.m2, 0.0) / w
        out = {
            "mean": mean,
            "var": var,
            "std": np.sqrt(var),
            "count": self.count.astype(np.float64),
            "min": self.min.copy(),
            "max": self.max.copy(),
            "sum": mean * w,
            "weight": w,
        }
        for k, v in out.items():
            if k not in ("count", "weight"):
                v[empty] = np.nan
        out["weight"][empty] = 0.0
        return out


# ---------------------------------------------------------------------------
# area weights


@dataclass(frozen=True, eq=False)
class AreaWeights:
    """Spherical band-area weights of a regular latitude grid.

    ``band`` holds one weight per latitude row and sums to 1; a cell's share
    of the full grid is ``band / nlon``.
    """

    lat: Grid
    band: np.ndarray
    nlon: int = 1

    def cells(self) -> np.ndarray:
        return np.repeat(self.band[:, None] / self.nlon, self.nlon, axis=1)

    def for_cube(self, cube: DataCube) -> np.ndarray:
        """Weight array broadcastable against the cube's dimension order."""
        lat = cube.schema.lat_dim
        if lat is None:
            raise UnknownDimension("cube has no latitude dimension")
        if not cube.grid(lat).same_coordinates(self.lat):
            raise IrregularLatGrid("area weights were computed for a different latitude grid")
        shape = [1] * len(cube.dims)
        shape[cube.axis(lat)] = self.band.size
        return self.band.reshape(shape)


def band_areas(lat: Grid) -> np.ndarray:
    """Unnormalised sin-difference areas of each latitude band (unit sphere, per radian of longitude)."""
    if not lat.regular or not _spacing_regular(lat.coordinates):
        raise IrregularLatGrid(f"latitude grid {lat.name!r} is not regular")
    half = abs(lat.step) / 2.0
    phi = lat.coordinates.astype(np.float64)
    top = np.radians(np.clip(phi + half, -90.0, 90.0))
    bot = np.radians(np.clip(phi - half, -90.0, 90.0))
    return np.sin(top) - np.sin(bot)


def area_weights(lat: Grid, lon: Optional[Grid] = None) -> AreaWeights:
    a = band_areas(lat)
    return AreaWeights(lat, a / a.sum(), len(lon) if lon is not None else 1)


# ---------------------------------------------------------------------------
# covariance


@dataclass
class WeightedCovAccumulator:
    """Weighted mean vector and co-moment matrix of a p-variate stream.

    As in :class:`WeightedMoments` the mean is ``mean + mean_c`` (a
    compensated pair) so that offsets far from zero do not cancel.
    """

    p: int
    wsum: float = 0.0
    mean: np.ndarray = field(default=None)
    comoment: np.ndarray = field(default=None)
    count: int = 0
    mean_c: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.p)
        if self.mean_c is None:
            self.mean_c = np.zeros(self.p)
        if self.comoment is None:
            self.comoment = np.zeros((self.p, self.p))

    def _symmetrize(self):
        iu = np.triu_indices(self.p, 1)
        self.comoment[(iu[1], iu[0])] = self.comoment[iu]

    def _copy(self):
        return WeightedCovAccumulator(self.p, self.wsum, self.mean.copy(), self.comoment.copy(), self.count,
                                      self.mean_c.copy())

    def accumulate(self, x, w: float = 1.0) -> "WeightedCovAccumulator":
        if not w > 0:
            raise NonPositiveWeight(f"weight must be positive, got {w}")
        x = np.asarray(x, dtype=np.float64)
        if np.any(np.isnan(x)):
            return self
        self.wsum += w
        d = (x - self.mean) - self.mean_c
        self.mean, err = _two_sum(self.mean, (w / self.wsum) * d)
        self.mean_c = self.mean_c + err
        d2 = (x - self.mean) - self.mean_c
        iu = np.triu_indices(self.p)
        self.comoment[iu] += w * d[iu[0]] * d2[iu[1]]
        self._symmetrize()
        self.count += 1
        return self

    def accumulate_batch(self, X, w=None) -> "WeightedCovAccumulator":
        """Two-pass moments of a batch (complete cases only), merged into self."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.p)
        w = np.ones(len(X)) if w is None else np.broadcast_to(np.asarray(w, dtype=np.float64), (len(X),))
        ok = ~np.any(np.isnan(X), axis=1) & (w > 0)
        X, w = X[ok], w[ok]
        if len(X) == 0:
            return self
        W = float(w.sum())
        # mean as first row + weighted mean offset, refined once
        hi = X[0].copy()
        lo = (w @ (X - hi)) / W
        D = (X - hi) - lo
        lo = lo + (w @ D) / W
        D = (X - hi) - lo
        C = (D * w[:, None]).T @ D
        iu = np.triu_indices(self.p)
        U = np.zeros_like(C)
        U[iu] = C[iu]
        mh, mc = _two_sum(hi, lo)
        batch = WeightedCovAccumulator(self.p, W, mh, U, len(X), mc)
        batch._symmetrize()
        merged = self.merge(batch)
        self.wsum, self.mean, self.comoment, self.count, self.mean_c = (
            merged.wsum, merged.mean, merged.comoment, merged.count, merged.mean_c)
        return self

    def merge(self, other: "WeightedCovAccumulator") -> "WeightedCovAccumulator":
        if other.count == 0:
            return self._copy()
        if self.count == 0:
            return other._copy()
        W = self.wsum + other.wsum
        delta = (other.mean - self.mean) + (other.mean_c - self.mean_c)
        mean, err = _two_sum(self.mean, delta * (other.wsum / W))
        iu = np.triu_indices(self.p)
        C = np.zeros((self.p, self.p))
        f = self.wsum * other.wsum / W
        C[iu] = self.comoment[iu] + other.comoment[iu] + f * delta[iu[0]] * delta[iu[1]]
        out = WeightedCovAccumulator(self.p, W, mean, C, self.count + other.count, self.mean_c + err)
        out._symmetrize()
        return out

    def covariance(self) -> np.ndarray:
        if self.count == 0:
            return np.full((self.p, self.p), np.nan)
        return self.comoment / self.wsum


# ---------------------------------------------------------------------------
# cube-level reductions


def _weight_array(cube: DataCube, weights):
    if weights is None:
        return None
    if isinstance(weights, AreaWeights):
        return weights.for_cube(cube)
    w = np.asarray(weights, dtype=np.float64)
    np.broadcast_shapes(w.shape, cube.shape)
    return w


def weighted_reduce_over(
    cube: DataCube,
    dims: Sequence[str],
    weights=None,
    statistics: Sequence[str] = ("mean",),
    workers: int = 1,
) -> DataCube:
    """Reduce ``dims`` with weighted streaming moments.

    ``weights`` is ``None`` (uniform), an :class:`AreaWeights`, or an array
    broadcastable to the cube shape.  The first statistic keeps each
    variable's name; further ones are emitted as ``<var>_<stat>``.
    """
    from .engine import _reduce

    for d in dims:
        cube.axis(d)
    out = _reduce(cube, dims, statistics=statistics, weights=_weight_array(cube, weights), workers=workers)
    params = {"dims": list(dims), "statistics": list(statistics), "weighted": weights is not None}
    return stamp(out, "weighted_reduce_over", params)


def weighted_covariance(cube: DataCube, over_dims: Optional[Sequence[str]] = None, weights=None) -> np.ndarray:
    """Weighted population covariance of the cube's variables (complete cases).

    Reduces over all dimensions when ``over_dims`` is None; otherwise the
    result has shape ``(*surviving_shape, p, p)``.
    """
    p = len(cube.variables)
    if p < 2:
        raise FewerThanTwoComplete("covariance needs at least two variables")
    over = list(cube.dims) if over_dims is None else list(over_dims)
    for d in over:
        cube.axis(d)
    w = _weight_array(cube, weights)
    data = np.stack([cube.values(v) for v in cube.variables], axis=-1)
    full_w = np.ones(cube.shape) if w is None else np.broadcast_to(w, cube.shape)
    red = [cube.axis(d) for d in over]
    keep = [i for i in range(len(cube.dims)) if i not in red]
    data = np.moveaxis(data, keep + red, list(range(len(keep) + len(red))))
    full_w = np.moveaxis(full_w, keep + red, list(range(len(keep) + len(red))))
    surv = data.shape[: len(keep)]
    out = np.empty(surv + (p, p))
    for idx in np.ndindex(*surv):
        acc = WeightedCovAccumulator(p).accumulate_batch(data[idx].reshape(-1, p), full_w[idx].ravel())
        if acc.count == 0:
            raise FewerThanTwoComplete(f"no complete cases at index {idx}")
        out[idx] = acc.covariance()
    return out
