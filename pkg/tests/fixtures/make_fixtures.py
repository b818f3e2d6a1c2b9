"""Regenerate the committed store fixtures (only needed if the format changes)."""

from pathlib import Path

import numpy as np

from esdc import DataCube, Grid, time_grid, write_cube
from esdc.model import AttributeSet, set_fixed_time, stamp

HERE = Path(__file__).parent


def fixture_cube():
    t = np.arange(5 * 4 * 6, dtype=np.float64).reshape(5, 4, 6) / 8.0
    t[1, 2, 3] = np.nan
    p = np.cos(t)
    p[:, 0, 0] = np.nan
    grids = [time_grid("2010-06-01", 5, 2), Grid.regular_range("lat", 10.25, -0.5, 4, units="degrees_north"),
             Grid.regular_range("lon", -3.0, 1.5, 6, units="degrees_east")]
    attrs = AttributeSet({"title": "fixture"}, {"lat": {"long_name": "latitude"}},
                         {"tair": {"units": "K"}, "precip": {"units": "mm"}})
    set_fixed_time("2024-01-01T00:00:00Z")
    try:
        cube = stamp(DataCube.from_numpy({"tair": t, "precip": p}, grids, chunks=(2, 3, 4), attrs=attrs),
                     "fixture", {"seed": 0})
    finally:
        set_fixed_time(None)
    return cube


if __name__ == "__main__":
    cube = fixture_cube()
    write_cube(cube, HERE / "cube_zlib.zarr", compression="zlib", overwrite=True)
    write_cube(cube, HERE / "cube_raw.zarr", compression="none", overwrite=True)
