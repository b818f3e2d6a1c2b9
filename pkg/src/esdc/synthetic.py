"""Seeded synthetic cubes used as fixtures and by the command line.

Presets
-------
zonal-temperature
    ``T = 30 cos^2(lat) - 10``, constant in time and longitude.  Its
    area-weighted global mean is 10 and its unweighted mean over a regular
    grid is 5.
seasonal-trend
    ``a t + sin(2 pi doy / 365) + noise`` with ``t`` in days since 1970-01-01.
random-blobs
    Gaussian background clipped to +-3 sd plus well-separated boxes offset
    by +-BLOB_AMPLITUDE in (time, y, x); the planted boxes are the ground
    truth and are recovered with ``z = BLOB_Z``.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import UnknownPreset, ValidationError
from .model import AttributeSet, DataCube, Grid, day_of_year_366, time_grid

PRESETS = ("zonal-temperature", "seasonal-trend", "random-blobs")
DEFAULT_SHAPES = {
    "zonal-temperature": (2, 360, 720),
    "seasonal-trend": (730, 8, 8),
    "random-blobs": (32, 16, 16),
}
TREND_PER_DAY = 1e-3
NOISE_SD = 0.1
BLOB_AMPLITUDE = 20.0
BLOB_NOISE_CLIP = 3.0
BLOB_MAX_EXTENT = (6, 5, 5)
BLOB_Z = 9.0


def global_grids(shape: Sequence[int], start="2000-01-01") -> List[Grid]:
    nt, ny, nx = shape
    dy, dx = 180.0 / ny, 360.0 / nx
    return [
        time_grid(start, nt),
        Grid.regular_range("lat", -90.0 + dy / 2, dy, ny, units="degrees_north"),
        Grid.regular_range("lon", -180.0 + dx / 2, dx, nx, units="degrees_east"),
    ]


def _zonal(grids, rng):
    lat = np.radians(grids[1].coordinates)
    row = 30.0 * np.cos(lat) ** 2 - 10.0
    shape = tuple(len(g) for g in grids)
    return np.broadcast_to(row[None, :, None], shape).copy()


def _seasonal(grids, rng):
    t = grids[0].coordinates
    shape = tuple(len(g) for g in grids)
    base = TREND_PER_DAY * t + np.sin(2 * np.pi * day_of_year_366(t) / 365.0)
    return base[:, None, None] + NOISE_SD * rng.standard_normal(shape)


def _overlaps(a, b):
    return all(a[2 * i] <= b[2 * i + 1] and b[2 * i] <= a[2 * i + 1] for i in range(len(a) // 2))


def _blobs(grids, rng):
    shape = tuple(len(g) for g in grids)
    data = np.clip(rng.standard_normal(shape), -BLOB_NOISE_CLIP, BLOB_NOISE_CLIP)
    target = int(rng.integers(2, 6))
    boxes = []
    for _ in range(200):
        if len(boxes) == target:
            break
        ext = [int(rng.integers(2, min(m, n) + 1)) for m, n in zip(BLOB_MAX_EXTENT, shape)]
        org = [int(rng.integers(0, n - e + 1)) for n, e in zip(shape, ext)]
        box = (org[0], org[0] + ext[0] - 1, org[1], org[1] + ext[1] - 1, org[2], org[2] + ext[2] - 1)
        # separated footprints: no shared or adjacent (y, x) cell with any other blob
        foot = (box[2] - 1, box[3] + 1, box[4] - 1, box[5] + 1)
        if any(_overlaps(foot, b[2:]) for b in boxes):
            continue
        boxes.append(box)
    truth = []
    for box in sorted(boxes, key=lambda b: (b[0], b[2], b[4])):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        t0, t1, y0, y1, x0, x1 = box
        data[t0: t1 + 1, y0: y1 + 1, x0: x1 + 1] += sign * BLOB_AMPLITUDE
        truth.append({
            "label": len(truth) + 1,
            "bbox": list(box),
            "cell_count": (t1 - t0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1),
            "amplitude": sign * BLOB_AMPLITUDE,
        })
    return data, truth


def gen_synthetic(
    preset: str,
    shape: Optional[Sequence[int]] = None,
    seed: int = 0,
    chunks: Optional[Sequence[int]] = None,
) -> Tuple[DataCube, Optional[list]]:
    """Build a preset cube; returns ``(cube, ground_truth)``.

    ``ground_truth`` is the list of planted components for ``random-blobs``
    (labelled in start-time, then bounding-box order) and ``None`` otherwise.
    """
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    shape = tuple(int(s) for s in (shape or DEFAULT_SHAPES[preset]))
    if len(shape) != 3 or min(shape) < 2:
        raise ValidationError("shape must be three sizes >= 2 (time, lat, lon)")
    grids = global_grids(shape)
    rng = np.random.default_rng(seed)
    truth = None
    if preset == "zonal-temperature":
        name, units, data = "temperature", "degC", _zonal(grids, rng)
    elif preset == "seasonal-trend":
        name, units, data = "signal", "1", _seasonal(grids, rng)
    else:
        name, units = "anomaly", "1"
        data, truth = _blobs(grids, rng)
    var_attrs = {"units": units}
    if preset == "random-blobs":
        var_attrs["anomaly"] = "true"
    attrs = AttributeSet(
        {"title": f"synthetic {preset}", "preset": preset, "seed": str(seed)},
        {},
        {name: var_attrs},
    )
    if chunks is None:
        chunks = tuple(min(n, c) for n, c in zip(shape, (64, 90, 180)))
    cube = DataCube.from_numpy({name: data}, grids, chunks=chunks, attrs=attrs)
    return cube, truth
