import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdc import CubeSchema, DataCube, Grid, lat_grid, lon_grid, order, time_grid
from esdc.cubing import (
    AccessPattern, RegridMethod, aggregate_temporal, align_to_schema, regrid_array, regrid_spatial,
    suggest_chunking,
)
from esdc.errors import (
    ConservativeOnIrregularGrid, DuplicateVariableName, IncompatibleUnits, MissingSpatialDims,
    NonTemporalCube, TargetFinerThanSource,
)
from esdc.model import DimKind, to_days

from oracles import band_area, conservative_oracle, exact_mean, sphere_integral

METHODS = [m.value for m in RegridMethod]


def map_cube(values, lat, lon, name="v", units="K"):
    from esdc.model import AttributeSet

    return DataCube.from_numpy({name: values}, [lat, lon], attrs=AttributeSet({}, {}, {name: {"units": units}}))


def global_grid(ny, nx):
    return (Grid.regular_range("lat", -90 + 90 / ny, 180 / ny, ny),
            Grid.regular_range("lon", -180 + 180 / nx, 360 / nx, nx))


class TestRegrid:
    @pytest.mark.parametrize("method", METHODS)
    def test_identity(self, method, rng):
        lat, lon = global_grid(12, 24)
        v = rng.standard_normal((3, 12, 24))
        out = regrid_array(v, lat, lon, lat, lon, method)
        np.testing.assert_array_equal(out, v)

    def test_block_mean_2x2(self):
        lat = Grid("lat", [-0.5, 0.5])
        lon = Grid("lon", [0.5, 1.5])
        out = regrid_array(np.array([[1.0, 2.0], [3.0, 4.0]]), lat, lon,
                           Grid("lat", [0.0, 2.0]), Grid("lon", [1.0, 3.0]), "block_mean")
        assert out[0, 0] == 2.5

    def test_conservative_four_bands(self):
        # bands centred at 0.25, 0.75, 89.25, 89.75 on a 0.5 degree grid; every
        # other band is NA so only those four contribute to one 90-degree target
        v = np.array([3.0, -1.0, 10.0, 7.0])
        areas = [band_area(a, b) for a, b in [(0.0, 0.5), (0.5, 1.0), (89.0, 89.5), (89.5, 90.0)]]
        expected = math.fsum(a * x for a, x in zip(areas, v)) / math.fsum(areas)
        src = Grid.regular_range("lat", 0.25, 0.5, 180)
        col = np.full(180, np.nan)
        col[[0, 1, 178, 179]] = v
        lon = Grid("lon", [0.0, 1.0])
        out = regrid_array(np.repeat(col[:, None], 2, axis=1), src, lon, Grid("lat", [45.0, 135.0]), lon,
                           "conservative")
        assert out[0, 0] == pytest.approx(expected, rel=1e-13)
        ref = conservative_oracle(np.repeat(col[:, None], 2, axis=1), src.coordinates, lon.coordinates,
                                  [45.0, 135.0], lon.coordinates)
        assert out[0, 0] == pytest.approx(ref[0, 0], rel=1e-13)

    def test_conservative_matches_overlap_oracle(self, rng):
        slat, slon = global_grid(18, 36)
        tlat, tlon = global_grid(12, 16)
        v = rng.standard_normal((18, 36))
        v[rng.random(v.shape) < 0.1] = np.nan
        got = regrid_array(v, slat, slon, tlat, tlon, "conservative")
        ref = conservative_oracle(v, slat.coordinates, slon.coordinates, tlat.coordinates, tlon.coordinates)
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-13)

    def test_conservative_irregular_rejected(self):
        lat = Grid("lat", [0.0, 1.0, 3.0])
        lon = Grid("lon", [0.0, 1.0])
        with pytest.raises(ConservativeOnIrregularGrid):
            regrid_array(np.zeros((3, 2)), lat, lon, Grid("lat", [0.0, 2.0]), lon, "conservative")

    def test_nearest_tie_smaller_index(self):
        lat = Grid("lat", [0.0, 2.0])
        lon = Grid("lon", [0.0, 1.0])
        out = regrid_array(np.array([[1.0, 1.0], [2.0, 2.0]]), lat, lon, Grid("lat", [1.0, 1.5]), lon, "nearest")
        assert out[0, 0] == 1.0 and out[1, 0] == 2.0

    def test_nearest_outside_extent_is_na(self):
        lat = Grid("lat", [0.0, 1.0])
        lon = Grid("lon", [0.0, 1.0])
        out = regrid_array(np.ones((2, 2)), lat, lon, Grid("lat", [0.5, 30.0]), lon, "nearest")
        assert out[0, 0] == 1.0 and np.isnan(out[1]).all()

    def test_nearest_wraps_longitude(self):
        lat, lon = global_grid(4, 8)
        v = np.tile(np.arange(8.0), (4, 1))
        out = regrid_array(v, lat, lon, lat, Grid("lon", [179.0, 178.0]), "nearest")
        assert out[0, 0] == 7.0  # 179 is nearest to 157.5 (index 7), not wrapped to -157.5
        out = regrid_array(v, lat, lon, lat, Grid("lon", [-179.0, -178.0]), "nearest")
        assert out[0, 0] == 0.0

    def test_bilinear_linear_field_exact_and_strict_na(self):
        lat, lon = Grid.regular_range("lat", 0, 1, 5), Grid.regular_range("lon", 0, 1, 5)
        yy, xx = np.meshgrid(lat.coordinates, lon.coordinates, indexing="ij")
        v = 2 * yy + 3 * xx
        tl, to = Grid("lat", [0.5, 2.25]), Grid("lon", [1.5, 3.75])
        out = regrid_array(v, lat, lon, tl, to, "bilinear")
        ty, tx = np.meshgrid(tl.coordinates, to.coordinates, indexing="ij")
        np.testing.assert_allclose(out, 2 * ty + 3 * tx, rtol=1e-14)
        v2 = v.copy()
        v2[0, 1] = np.nan
        out2 = regrid_array(v2, lat, lon, tl, to, "bilinear")
        assert np.isnan(out2[0, 0]) and not np.isnan(out2[1, 1])

    def test_block_mean_constant_and_na_renormalised(self, rng):
        lat, lon = global_grid(12, 24)
        v = np.full((12, 24), 4.0)
        v[rng.random(v.shape) < 0.3] = np.nan
        tl, to = global_grid(4, 6)
        out = regrid_array(v, lat, lon, tl, to, "block_mean")
        assert np.all((out == 4.0) | np.isnan(out))

    def test_cube_level_and_provenance(self, rng):
        lat, lon = global_grid(6, 12)
        c = DataCube.from_numpy({"a": rng.standard_normal((3, 6, 12))}, [time_grid("2000-01-01", 3), lat, lon])
        tl, to = global_grid(3, 4)
        out = regrid_spatial(c, tl, to, "conservative")
        assert out.grid("lat").same_coordinates(tl) and out.shape == (3, 3, 4)
        assert out.attrs.history_lines()[-1].split()[1] == "regrid_spatial"

    def test_missing_spatial(self):
        c = DataCube.from_numpy({"a": np.zeros((3, 2))}, [time_grid("2000-01-01", 3), Grid("depth", [0.0, 1.0])])
        with pytest.raises(MissingSpatialDims):
            regrid_spatial(c, lat_grid(90), lon_grid(180))


@settings(max_examples=60)
@given(st.sampled_from([2, 3, 4, 5, 6, 9, 10, 12, 18, 20, 30, 36]), st.sampled_from([3, 4, 5, 6, 8, 10, 12, 24, 36, 45]),
       st.sampled_from([2, 3, 4, 5, 6, 9, 10, 12, 18, 20, 30, 36]), st.sampled_from([3, 4, 5, 6, 8, 10, 12, 24, 36, 45]),
       st.integers(0, 2**32 - 1), st.floats(-180, 180))
def test_conservative_preserves_integral(sy, sx, ty, tx, seed, lon0):
    slat = Grid.regular_range("lat", -90 + 90 / sy, 180 / sy, sy)
    slon = Grid.regular_range("lon", lon0 + 180 / sx, 360 / sx, sx)
    tlat, tlon = global_grid(ty, tx)
    v = np.random.default_rng(seed).standard_normal((sy, sx)) + 5
    out = regrid_array(v, slat, slon, tlat, tlon, "conservative")
    a = sphere_integral(v, slat.coordinates, slon.coordinates)
    b = sphere_integral(out, tlat.coordinates, tlon.coordinates)
    assert abs(a - b) <= 1e-10 * abs(a)


@settings(max_examples=40)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
def test_nearest_value_preserving(sy, sx, ty, tx, seed):
    slat, slon = global_grid(sy, sx)
    tlat = Grid.regular_range("lat", -80.0, 160 / max(ty, 1), ty) if ty > 1 else Grid("lat", [-10.0, 10.0])
    tlon = Grid.regular_range("lon", -170.0, 340 / max(tx, 1), tx) if tx > 1 else Grid("lon", [0.0, 5.0])
    v = np.random.default_rng(seed).standard_normal((sy, sx))
    out = regrid_array(v, slat, slon, tlat, tlon, "nearest")
    assert set(out[~np.isnan(out)].tolist()) <= set(v.ravel().tolist())


class TestAggregate:
    def series(self, days, values):
        return DataCube.from_numpy({"v": np.asarray(values, float)}, [Grid("time", days, DimKind.TEMPORAL)])

    def test_january_mean(self):
        c = self.series(time_grid("2001-01-01", 31).coordinates, np.arange(1.0, 32.0))
        out = aggregate_temporal(c, Grid("time", ["2001-01-01", "2001-02-01"], DimKind.TEMPORAL), "mean")
        assert out.values("v")[0] == 16.0 and np.isnan(out.values("v")[1])

    def test_min_count(self):
        d0 = to_days("2001-01-01")
        c = self.series([d0, d0 + 5, d0 + 6], [1.0, 2.0, 3.0])
        out = aggregate_temporal(c, Grid("time", [d0, d0 + 5], DimKind.TEMPORAL), "mean", min_count=2)
        assert np.isnan(out.values("v")[0]) and out.values("v")[1] == 2.5

    def test_irregular_bins_oracle(self):
        d0 = to_days("2001-01-01")
        days = [d0, d0 + 3, d0 + 4, d0 + 7, d0 + 12]
        vals = [0.1, 0.7, 1.9, 3.3, -2.0]
        c = self.series(days, vals)
        tgt = [d0, d0 + 5, d0 + 10]
        out = aggregate_temporal(c, Grid("time", tgt, DimKind.TEMPORAL), "mean")
        for k, lo in enumerate(tgt):
            members = [v for d, v in zip(days, vals) if lo <= d < lo + 5]
            assert out.values("v")[k] == pytest.approx(exact_mean(members), rel=1e-15)

    def test_count_and_median(self):
        d0 = to_days("2001-01-01")
        c = self.series([d0, d0 + 1, d0 + 2, d0 + 6], [1.0, np.nan, 5.0, 2.0])
        tgt = Grid("time", [d0, d0 + 5, d0 + 10], DimKind.TEMPORAL)
        cnt = aggregate_temporal(c, tgt, "count").values("v")
        assert cnt.tolist() == [2.0, 1.0, 0.0]
        med = aggregate_temporal(c, tgt, "median").values("v")
        assert med[0] == 3.0 and med[1] == 2.0 and np.isnan(med[2])

    def test_errors(self):
        d0 = to_days("2001-01-01")
        c = self.series([d0, d0 + 1], [1.0, 2.0])
        with pytest.raises(TargetFinerThanSource):
            aggregate_temporal(c, Grid("time", [d0 + 100, d0 + 101], DimKind.TEMPORAL))
        m = DataCube.from_numpy({"v": np.zeros(2)}, [Grid("lat", [0.0, 1.0])])
        with pytest.raises(NonTemporalCube):
            aggregate_temporal(m, Grid("time", [d0, d0 + 1], DimKind.TEMPORAL))


@settings(max_examples=40)
@given(st.lists(st.integers(0, 60), min_size=2, max_size=30, unique=True), st.integers(1, 10))
def test_count_reducer_nonnegative_integers(days, step):
    days = sorted(days)
    vals = np.where(np.arange(len(days)) % 3 == 0, np.nan, 1.0)
    c = DataCube.from_numpy({"v": vals}, [Grid("time", days, DimKind.TEMPORAL)])
    tgt = Grid("time", np.arange(0, 61, step) if step < 61 else [0, 61], DimKind.TEMPORAL)
    if len(tgt) < 2:
        return
    out = aggregate_temporal(c, tgt, "count").values("v")
    assert not np.isnan(out).any() and np.all(out >= 0) and np.all(out == np.round(out))


class TestAlign:
    def test_single_cube_on_target(self, rng):
        lat, lon = global_grid(4, 8)
        c = map_cube(rng.standard_normal((4, 8)), lat, lon, "tair")
        schema = CubeSchema((lat, lon), ("tair",), (4, 8))
        out = align_to_schema([c], schema)
        np.testing.assert_array_equal(out.values("tair"), c.values("tair"))
        assert out.variables == ("tair",)

    def test_disjoint_coverage(self):
        lat, lon = global_grid(4, 8)
        west = map_cube(np.ones((4, 4)), lat, Grid("lon", lon.coordinates[:4]), "a")
        east = map_cube(np.full((4, 4), 2.0), lat, Grid("lon", lon.coordinates[4:]), "b")
        schema = CubeSchema((lat, lon), ("a", "b"), (4, 8))
        out = align_to_schema([west, east], schema)
        assert np.all(out.values("a")[:, :4] == 1) and np.isnan(out.values("a")[:, 4:]).all()
        assert np.all(out.values("b")[:, 4:] == 2) and np.isnan(out.values("b")[:, :4]).all()

    def test_three_variables_order_four(self, rng):
        grids = [time_grid("2000-01-01", 3), *global_grid(4, 8)]
        cubes = [DataCube.from_numpy({n: rng.standard_normal((3, 4, 8))}, grids) for n in "abc"]
        out = align_to_schema(cubes, CubeSchema(tuple(grids), ("a", "b", "c"), (3, 4, 8)))
        assert order(out) == 4

    def test_duplicates_and_units(self):
        lat, lon = global_grid(2, 4)
        a = map_cube(np.ones((2, 4)), lat, lon, "a", "K")
        b = map_cube(np.ones((2, 4)), lat, lon, "a", "degC")
        schema = CubeSchema((lat, lon), ("a",), (2, 4))
        with pytest.raises(IncompatibleUnits):
            align_to_schema([a, b], schema)
        with pytest.raises(DuplicateVariableName):
            align_to_schema([a, map_cube(np.ones((2, 4)), lat, lon, "a", "K")], schema)
        merged = align_to_schema([a, map_cube(np.full((2, 4), 3.0), lat, lon, "a", "K")], schema, mosaic=True)
        assert np.all(merged.values("a") == 1.0)


class TestChunking:
    def schema(self, nt, ny, nx):
        return CubeSchema((time_grid("2000-01-01", nt), Grid.regular_range("lat", 0, 1, ny),
                           Grid.regular_range("lon", 0, 1, nx)), ("v",), (1, 1, 1))

    def test_temporal(self):
        c = suggest_chunking(self.schema(1000, 50, 60), "temporal", 64 * 1024)
        assert c[0] == 1000 and c[1] * c[2] <= 8192 // 1000 and c[1] >= 1 and c[2] >= 1

    def test_spatial_full_map(self):
        s = CubeSchema((time_grid("2000-01-01", 365), Grid.regular_range("lat", 0, 1, 100),
                        Grid.regular_range("lon", 0, 1, 100)), ("v",), (1, 1, 1))
        c = suggest_chunking(s, AccessPattern.SPATIAL, 8 * 100 * 100 * 3)
        assert c == (3, 100, 100)

    def test_unconstrained(self):
        assert suggest_chunking(self.schema(10, 5, 5), "hybrid", 10**9) == (10, 5, 5)


@settings(max_examples=60)
@given(st.integers(1, 500), st.integers(1, 200), st.integers(1, 300), st.integers(8, 10**6),
       st.sampled_from(["temporal", "spatial", "hybrid"]))
def test_chunking_within_budget(nt, ny, nx, budget, pattern):
    s = CubeSchema((time_grid("2000-01-01", max(nt, 2)), Grid.regular_range("lat", 0, 1, max(ny, 2)),
                    Grid.regular_range("lon", 0, 1, max(nx, 2))), ("v",), (1, 1, 1))
    c = suggest_chunking(s, pattern, budget)
    assert all(1 <= e <= n for e, n in zip(c, s.shape))
    assert int(np.prod(c)) * 8 <= budget
