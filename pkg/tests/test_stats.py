import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdc import DataCube, Grid, lat_grid, lon_grid, time_grid
from esdc.errors import FewerThanTwoComplete, IrregularLatGrid, NonPositiveWeight
from esdc.stats import (
    AreaWeights, MomentsArray, WeightedCovAccumulator, WeightedMoments, area_weights, band_areas,
    moments_accumulate, moments_merge, weighted_covariance, weighted_reduce_over,
)

from oracles import band_area, covariance_oracle, two_pass_weighted


def stream(xs, ws=None):
    acc = WeightedMoments()
    for i, x in enumerate(xs):
        moments_accumulate(acc, x, 1.0 if ws is None else ws[i])
    return acc


class TestMoments:
    def test_small_weighted_stream(self):
        r = stream([1, 2, 3], [1, 1, 2]).finalize()
        m, v = two_pass_weighted([1, 2, 3], [1, 1, 2])
        assert (m, v) == (2.25, 0.6875)
        assert r["mean"] == 2.25 and r["var"] == 0.6875

    def test_constant_stream(self):
        r = stream([4.5] * 10, list(np.linspace(0.1, 3, 10))).finalize()
        assert r["mean"] == 4.5 and r["var"] == 0.0

    def test_single_observation(self):
        r = stream([7.0]).finalize()
        assert r["var"] == 0 and r["min"] == r["max"] == 7.0 and r["count"] == 1

    def test_empty_is_na(self):
        r = WeightedMoments().finalize()
        assert math.isnan(r["mean"]) and math.isnan(r["var"]) and r["count"] == 0

    def test_nonpositive_weight(self):
        with pytest.raises(NonPositiveWeight):
            WeightedMoments().accumulate(1.0, 0.0)
        with pytest.raises(NonPositiveWeight):
            WeightedMoments().accumulate_array([1.0, 2.0], [1.0, -1.0])

    def test_nan_skipped(self):
        r = stream([1.0, float("nan"), 3.0]).finalize()
        assert r["mean"] == 2.0 and r["count"] == 2

    def test_merge_with_empty_identity(self):
        a = stream([1.0, 5.0, 2.0])
        assert moments_merge(a, WeightedMoments()).finalize() == a.finalize()
        assert moments_merge(WeightedMoments(), a).finalize() == a.finalize()

    def test_merge_halves(self, rng):
        x = rng.standard_normal(100_000)
        whole = WeightedMoments().accumulate_array(x).finalize()
        merged = WeightedMoments().accumulate_array(x[:50_000]).merge(
            WeightedMoments().accumulate_array(x[50_000:])).finalize()
        for k in ("mean", "var"):
            assert merged[k] == pytest.approx(whole[k], rel=1e-12, abs=1e-15)
        assert merged["count"] == whole["count"]

    def test_merge_symmetric(self, rng):
        a = WeightedMoments().accumulate_array(rng.standard_normal(1000), rng.random(1000) + 0.5)
        b = WeightedMoments().accumulate_array(rng.standard_normal(300) + 3, rng.random(300) + 0.5)
        f1, f2 = a.merge(b).finalize(), b.merge(a).finalize()
        for k in ("mean", "var", "weight"):
            assert f1[k] == pytest.approx(f2[k], rel=1e-12)

    def test_scalar_and_array_paths_agree(self, rng):
        x = rng.standard_normal(500)
        w = rng.random(500) + 0.1
        assert stream(x, w).finalize() == WeightedMoments().accumulate_array(x, w).finalize()

    def test_streaming_vs_two_pass_shifted(self, rng, backend):
        n = 10**6
        x = rng.random(n)
        w = rng.random(n) + 1e-3
        for shift in (0.0, 1e9):
            xs = x + shift
            _, v_oracle = two_pass_weighted(xs, w)
            v = WeightedMoments().accumulate_array(xs, w).finalize()["var"]
            assert abs(v - v_oracle) / v_oracle < 1e-10

    def test_state_is_constant_size(self):
        a = stream([1.0] * 10)
        b = stream([1.0] * 10_000)
        assert a.__dict__.keys() == b.__dict__.keys()


class TestMomentsArray:
    def test_grouped_against_scalar(self, rng, backend):
        x = rng.standard_normal(1000)
        g = rng.integers(0, 4, 1000)
        st_ = MomentsArray(4).accumulate(x, np.ones(1000), g).finalize()
        for k in range(4):
            r = stream(x[g == k]).finalize()
            assert st_["mean"][k] == r["mean"] and st_["var"][k] == r["var"]

    def test_merge_partial_positions(self, rng):
        a = MomentsArray(3).accumulate([1.0, 2.0], [1.0, 1.0], [0, 2])
        b = MomentsArray(2).accumulate([3.0, 5.0], [1.0, 1.0], [0, 1])
        a.merge(b, at=[0, 1])
        f = a.finalize()
        assert f["mean"].tolist() == [2.0, 5.0, 2.0]
        assert f["count"].tolist() == [2.0, 1.0, 1.0]

    def test_empty_group_na(self):
        f = MomentsArray(2).accumulate([1.0], [1.0], [0]).finalize()
        assert np.isnan(f["mean"][1]) and f["weight"][1] == 0.0


class TestAreaWeights:
    def test_symmetric_bands(self):
        w = area_weights(Grid("lat", [-45.0, 45.0]))
        np.testing.assert_allclose(w.band, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_equator_pole_ratio(self):
        w = area_weights(lat_grid(0.5))
        ratio = w.band[180] / w.band[359]
        expected = band_area(0.0, 0.5) / band_area(89.5, 90.0)
        assert ratio == pytest.approx(expected, rel=1e-9)
        assert ratio == pytest.approx(229.2, abs=0.05)

    def test_normalised_and_monotone(self):
        w = area_weights(lat_grid(0.5), lon_grid(0.5))
        assert abs(w.band.sum() - 1) < 1e-12
        assert abs(w.cells().sum() - 1) < 1e-12
        north = w.band[180:]
        assert np.all(np.diff(north) < 0)
        np.testing.assert_allclose(w.band, w.band[::-1], rtol=1e-12)

    def test_band_areas_sum_to_sphere(self):
        assert math.fsum(band_areas(lat_grid(1.0))) == pytest.approx(2.0, rel=1e-12)

    def test_irregular(self):
        with pytest.raises(IrregularLatGrid):
            area_weights(Grid("lat", [0.0, 1.0, 3.0]))


def zonal_cube(res=0.5, nt=2):
    lat, lon = lat_grid(res), lon_grid(res)
    row = 30 * np.cos(np.radians(lat.coordinates)) ** 2 - 10
    data = np.broadcast_to(row[None, :, None], (nt, len(lat), len(lon))).copy()
    return DataCube.from_numpy({"t": data}, [time_grid("2000-01-01", nt), lat, lon], chunks=(1, 90, 180))


class TestReduce:
    def test_constant_cube(self):
        c = zonal_cube(2.0).with_data({"t": np.full((2, 90, 180), 10.0)})
        for w in (None, area_weights(c.grid("lat"))):
            out = weighted_reduce_over(c, ["lat", "lon"], w)
            np.testing.assert_allclose(out.values("t"), 10.0, rtol=1e-14)
            assert out.dims == ("time",)

    def test_zonal_weighting_effect(self):
        c = zonal_cube()
        u = weighted_reduce_over(c, ["lat", "lon"]).values("t")
        w = weighted_reduce_over(c, ["lat", "lon"], area_weights(c.grid("lat"))).values("t")
        assert np.all(np.abs(u - 5.0) < 5e-3) and np.all(np.abs(w - 10.0) < 5e-3)

    def test_single_latitude(self, rng):
        lat = Grid("lat", [10.0, 10.5])
        c = DataCube.from_numpy({"a": rng.standard_normal((2, 5))}, [lat, Grid.regular_range("lon", 0, 1, 5)])
        c1 = weighted_reduce_over(c, ["lon"])
        c2 = weighted_reduce_over(c, ["lon"], area_weights(lat))
        np.testing.assert_allclose(c1.values("a"), c2.values("a"), rtol=1e-14)

    def test_all_na_cell_gives_na(self):
        d = np.ones((2, 3))
        d[1] = np.nan
        c = DataCube.from_numpy({"a": d}, [Grid.regular_range("lat", 0, 1, 2), Grid.regular_range("lon", 0, 1, 3)])
        out = weighted_reduce_over(c, ["lon"], statistics=("mean", "count"))
        assert out.values("a")[0] == 1.0 and np.isnan(out.values("a")[1])
        assert out.values("a_count").tolist() == [3.0, 0.0]

    def test_workers_identical(self, rng):
        c = zonal_cube(2.0, nt=5).with_data({"t": rng.standard_normal((5, 90, 180))})
        w = area_weights(c.grid("lat"))
        a = weighted_reduce_over(c, ["time", "lon"], w, ("mean", "var")).values("t_var")
        b = weighted_reduce_over(c, ["time", "lon"], w, ("mean", "var"), workers=4).values("t_var")
        np.testing.assert_array_equal(a, b)

    def test_argmax_unchanged_by_weighting(self, rng):
        c = zonal_cube(2.0, nt=3).with_data({"t": rng.standard_normal((3, 90, 180))})
        u = weighted_reduce_over(c, ["time"]).values("t")
        w = weighted_reduce_over(c, ["time"], np.ones((3, 1, 1)) * 2.5).values("t")
        assert np.argmax(u) == np.argmax(w)

    def test_reduce_against_two_pass(self, rng):
        c = zonal_cube(5.0, nt=4).with_data({"t": rng.standard_normal((4, 36, 72))})
        wts = area_weights(c.grid("lat"))
        out = weighted_reduce_over(c, ["lat", "lon"], wts, ("mean", "var"))
        full_w = np.broadcast_to(wts.band[:, None], (36, 72))
        for t in range(4):
            m, v = two_pass_weighted(c.values("t")[t], full_w)
            assert out.values("t")[t] == pytest.approx(m, rel=1e-11, abs=1e-14)
            assert out.values("t_var")[t] == pytest.approx(v, rel=1e-11)


class TestCovariance:
    def test_x_2x(self):
        acc = WeightedCovAccumulator(2)
        for x in (1.0, 2.0, 3.0):
            acc.accumulate([x, 2 * x])
        np.testing.assert_allclose(acc.covariance(), [[2 / 3, 4 / 3], [4 / 3, 8 / 3]], rtol=1e-15)

    def test_constant_is_zero(self):
        acc = WeightedCovAccumulator(2).accumulate_batch(np.tile([3.0, -1.0], (10, 1)))
        assert np.all(acc.covariance() == 0)

    def test_standardised_unit_diagonal(self, rng):
        X = rng.standard_normal((500, 3))
        X = (X - X.mean(0)) / X.std(0)
        C = WeightedCovAccumulator(3).accumulate_batch(X).covariance()
        np.testing.assert_allclose(np.diag(C), 1.0, atol=1e-12)

    def test_against_oracle_and_symmetry(self, rng):
        X = rng.standard_normal((400, 4)) + 1e6
        w = rng.random(400) + 0.1
        seq = WeightedCovAccumulator(4)
        for row, wi in zip(X, w):
            seq.accumulate(row, wi)
        batch = WeightedCovAccumulator(4).accumulate_batch(X[:150], w[:150]).merge(
            WeightedCovAccumulator(4).accumulate_batch(X[150:], w[150:]))
        ref = covariance_oracle(X, w)
        for C in (seq.covariance(), batch.covariance()):
            np.testing.assert_allclose(C, ref, rtol=1e-9)
            assert np.array_equal(C, C.T)
            assert np.all(np.diag(C) >= 0)

    def test_cube_covariance_complete_case(self):
        a = np.array([[1.0, 2.0, 3.0, np.nan]])
        b = 2 * a
        b[0, 0] = np.nan
        c = DataCube.from_numpy({"a": np.vstack([a, a]), "b": np.vstack([b, b])},
                                [Grid("lat", [0.0, 1.0]), Grid.regular_range("lon", 0, 1, 4)])
        C = weighted_covariance(c)
        # complete cases: x = 2, 3 -> var 0.25
        np.testing.assert_allclose(C, [[0.25, 0.5], [0.5, 1.0]], rtol=1e-15)

    def test_fewer_than_two(self):
        c = DataCube.from_numpy({"a": np.ones((2, 2))}, [Grid("lat", [0.0, 1.0]), Grid("lon", [0.0, 1.0])])
        with pytest.raises(FewerThanTwoComplete):
            weighted_covariance(c)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=60), st.integers(1, 2), st.integers(0, 10**6))
def test_merge_associative_and_scale_equivariant(xs, cut, seed):
    rng = np.random.default_rng(seed)
    x = np.array(xs)
    w = rng.random(x.size) + 0.1
    i, j = sorted(rng.integers(1, x.size, 2))
    a = WeightedMoments().accumulate_array(x[:i], w[:i])
    b = WeightedMoments().accumulate_array(x[i:j], w[i:j])
    c = WeightedMoments().accumulate_array(x[j:], w[j:])
    l, r = (a.merge(b)).merge(c).finalize(), a.merge(b.merge(c)).finalize()
    scaled = WeightedMoments().accumulate_array(x, w * (7.0 ** cut)).finalize()
    plain = WeightedMoments().accumulate_array(x, w).finalize()
    scale = max(1.0, float(np.max(np.abs(x))))
    assert l["mean"] == pytest.approx(r["mean"], rel=1e-12, abs=1e-12 * scale)
    assert l["var"] == pytest.approx(r["var"], rel=1e-9, abs=1e-12 * scale ** 2)
    assert scaled["mean"] == pytest.approx(plain["mean"], rel=1e-12, abs=1e-12 * scale)
    assert scaled["var"] == pytest.approx(plain["var"], rel=1e-9, abs=1e-12 * scale ** 2)
    assert l["min"] == r["min"] and l["max"] == r["max"] and l["count"] == r["count"]
