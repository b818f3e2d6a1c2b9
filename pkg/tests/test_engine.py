import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdc import DataCube, Grid, open_cube, time_grid, write_cube
from esdc.engine import ApplySpec, ExecutionReport, apply_split_combine, reduce_streaming
from esdc.errors import BudgetTooSmall, ShapeMismatch, UnknownDimension
from esdc.harmonise import climatology
from esdc.stats import MomentsArray, weighted_reduce_over

from funclib import library, sequential_oracle
from oracles import two_pass_weighted


def rand_cube(nt, ny, nx, chunks, seed=0, nan_frac=0.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((nt, ny, nx))
    a[rng.random(a.shape) < nan_frac] = np.nan
    grids = [time_grid("2001-01-01", nt), Grid.regular_range("lat", 0, 1, ny), Grid.regular_range("lon", 0, 1, nx)]
    return DataCube.from_numpy({"v": a}, grids, chunks=chunks)


def test_identity_over_time():
    c = rand_cube(12, 3, 4, (5, 2, 3))
    lib = library(c)
    dims, grids, f, _ = lib["identity"]
    out = apply_split_combine(c, f, ApplySpec(dims, grids))
    assert out.dims == ("lat", "lon", "t_out")
    np.testing.assert_array_equal(np.moveaxis(out.values("v"), -1, 0), c.values("v"))


def test_spatial_mean_matches_reduce():
    c = rand_cube(6, 8, 10, (2, 3, 4), seed=1)
    out = apply_split_combine(c, np.mean, ApplySpec(["lat", "lon"]))
    ref = weighted_reduce_over(c, ["lat", "lon"])
    assert out.dims == ("time",)
    np.testing.assert_allclose(out.values("v"), ref.values("v"), rtol=1e-12, atol=1e-15)


def test_doy_mean_matches_climatology_oracle():
    c = rand_cube(730, 8, 8, (100, 4, 4), seed=2)
    dims, grids, f, _ = library(c)["doy_mean"]
    out = apply_split_combine(c, f, ApplySpec(dims, grids, workers=3))
    ref = sequential_oracle(c, "v", dims, (366,), f)
    np.testing.assert_array_equal(out.values("v"), ref)
    clim = climatology(c, 1).values("v")
    np.testing.assert_allclose(out.values("v"), clim, rtol=1e-12, atol=1e-15, equal_nan=True)


@settings(max_examples=25)
@given(st.integers(2, 16), st.integers(2, 16), st.integers(2, 64), st.data())
def test_library_oracle_equivalence(ny, nx, nt, data):
    chunks = (data.draw(st.integers(1, nt)), data.draw(st.integers(1, ny)), data.draw(st.integers(1, nx)))
    c = rand_cube(nt, ny, nx, chunks, seed=nt * ny + nx, nan_frac=0.05)
    for name, (dims, grids, f, insensitive) in library(c).items():
        ref = sequential_oracle(c, "v", dims, tuple(len(g) for g in grids), f)
        results = []
        for workers in (1, 2, 7):
            report = ExecutionReport()
            budget = data.draw(st.sampled_from([None, 1, 3]))
            per_loop = 8 * (int(np.prod([len(c.grid(d)) for d in dims])) + int(np.prod([len(g) for g in grids])))
            b = 256 * 2**20 if budget is None else per_loop * budget
            out = apply_split_combine(c, f, ApplySpec(dims, grids, memory_budget_bytes=b, workers=workers), report)
            assert report.peak_resident_bytes <= report.budget_bytes == b
            results.append(out.values("v"))
        for r in results[1:]:
            np.testing.assert_array_equal(r, results[0])
        if insensitive:
            np.testing.assert_array_equal(results[0], ref)
        else:
            np.testing.assert_allclose(results[0], ref, rtol=1e-12, atol=1e-12, equal_nan=True)


def test_budget_too_small():
    c = rand_cube(10, 4, 4, (5, 2, 2))
    with pytest.raises(BudgetTooSmall):
        apply_split_combine(c, np.mean, ApplySpec(["time"], memory_budget_bytes=8 * 10))


def test_shape_mismatch_reports_loop_index():
    c = rand_cube(4, 3, 3, (2, 3, 3))

    def bad(x):
        return x[:1] if x[0] > 10 else np.float64(0)

    def bad2(x):
        return np.zeros(2)

    with pytest.raises(ShapeMismatch) as ei:
        apply_split_combine(c, bad2, ApplySpec(["time"]))
    assert "(0, 0)" in str(ei.value)


def test_na_reaches_function():
    c = rand_cube(5, 2, 2, (5, 2, 2), nan_frac=0.5, seed=9)
    out = apply_split_combine(c, lambda x: np.float64(np.isnan(x).sum()), ApplySpec(["time"]))
    np.testing.assert_array_equal(out.values("v"), np.isnan(c.values("v")).sum(axis=0))


def test_chunk_reads_once_per_pass(tmp_path):
    c = rand_cube(20, 6, 6, (5, 3, 3))
    lazy = open_cube(write_cube(c, tmp_path / "s"))
    report = ExecutionReport()
    apply_split_combine(lazy, np.mean, ApplySpec(["lat", "lon"]), report)
    assert report.chunk_reads == 4 * 2 * 2


class TestReduceStreaming:
    def test_sum_all_ones(self):
        c = DataCube.from_numpy({"v": np.ones((10, 10))}, [Grid.regular_range("lat", 0, 1, 10),
                                                          Grid.regular_range("lon", 0, 1, 10)], chunks=(3, 4))
        out = reduce_streaming(c, ["lat", "lon"], statistics=("sum",))
        assert out.values("v") == 100.0

    def test_each_chunk_read_once(self, tmp_path):
        c = rand_cube(17, 9, 7, (4, 4, 3))
        lazy = open_cube(write_cube(c, tmp_path / "s"))
        report = ExecutionReport()
        reduce_streaming(lazy, ["time"], report=report, workers=3)
        n_chunks = 5 * 3 * 3
        assert report.chunk_reads == n_chunks
        log = lazy.array("v").read_log
        assert len(log) == len(set(log)) == n_chunks

    def test_pixel_variance_two_pass(self):
        c = rand_cube(50, 4, 5, (7, 2, 2), seed=3, nan_frac=0.1)
        out = reduce_streaming(c, ["time"], statistics=("mean", "var"))
        a = c.values("v")
        for y in range(4):
            for x in range(5):
                m, v = two_pass_weighted(a[:, y, x])
                assert out.values("v")[y, x] == pytest.approx(m, rel=1e-12, abs=1e-15)
                assert out.values("v_var")[y, x] == pytest.approx(v, rel=1e-12)

    def test_equals_split_combine(self):
        c = rand_cube(64, 16, 16, (10, 5, 6), seed=4)
        s = reduce_streaming(c, ["time"], statistics=("mean",), workers=2).values("v")
        a = apply_split_combine(c, np.mean, ApplySpec(["time"])).values("v")
        np.testing.assert_allclose(s, a, rtol=1e-12, atol=1e-15)

    def test_workers_bitwise(self):
        c = rand_cube(30, 8, 8, (4, 3, 3), seed=5)
        outs = [reduce_streaming(c, ["time", "lon"], statistics=("var",), workers=w).values("v") for w in (1, 2, 7)]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_custom_reducer(self):
        class Counter:
            def __init__(self, n):
                self.n = np.zeros(n)

            def accumulate(self, values, weights, groups):
                np.add.at(self.n, groups, ~np.isnan(values))

            def merge(self, other, at=None):
                idx = np.arange(self.n.size) if at is None else at
                self.n[idx] += other.n

            def finalize(self):
                return {"n": self.n}

        c = rand_cube(9, 3, 4, (2, 2, 2), nan_frac=0.3, seed=6)
        out = reduce_streaming(c, ["time"], reducer=Counter, statistics=("n",))
        np.testing.assert_array_equal(out.values("v"), (~np.isnan(c.values("v"))).sum(axis=0))

    def test_unknown_dim(self):
        with pytest.raises(UnknownDimension):
            reduce_streaming(rand_cube(3, 2, 2, (1, 1, 1)), ["depth"])

    def test_moments_array_is_default(self):
        assert reduce_streaming.__defaults__[0] is MomentsArray
