"""Static grayscale renders of cube faces as binary PGM images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, ValidationError
from .model import DataCube

FACES = ("map", "hovmoeller")


def face_slice(cube: DataCube, variable: str, face: str, at: int) -> np.ndarray:
    """2-D slice with rows = latitude (north first).

    ``map`` fixes time index ``at`` (columns = longitude); ``hovmoeller``
    fixes longitude index ``at`` (columns = time).
    """
    t, y, x = cube.schema.time_dim, cube.schema.lat_dim, cube.schema.lon_dim
    if y is None or x is None:
        raise ValidationError("rendering needs lat and lon dimensions")
    if face not in FACES:
        raise ValidationError(f"unknown face {face!r}; expected one of {FACES}")
    fixed = t if face == "map" else x
    if fixed is None:
        raise ValidationError("map and hovmoeller faces need a time dimension")
    n = len(cube.grid(fixed))
    if not 0 <= at < n:
        raise IndexOutOfRange(f"index {at} outside 0..{n - 1} of {fixed!r}")
    if len(cube.dims) != 3:
        raise ValidationError("rendering needs a (time, lat, lon) cube")
    vals = cube.values(variable)
    vals = np.moveaxis(vals, [cube.axis(fixed), cube.axis(y)], [0, 1])[at]
    # rows: latitude, north at the top
    if cube.grid(y).coordinates[0] < cube.grid(y).coordinates[-1]:
        vals = vals[::-1]
    return vals


def to_gray(vals: np.ndarray):
    """Linear map of the slice's (min, max) onto 0..255; NA -> 0, constant -> 128."""
    ok = ~np.isnan(vals)
    img = np.zeros(vals.shape, dtype=np.uint8)
    if not ok.any():
        return img, (float("nan"), float("nan"))
    lo, hi = float(vals[ok].min()), float(vals[ok].max())
    if hi == lo:
        img[ok] = 128
    else:
        img[ok] = np.floor((vals[ok] - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    return img, (lo, hi)


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def render_face(cube: DataCube, variable: str, face: str, at: int, out_path) -> np.ndarray:
    """Write ``out_path`` (PGM) plus ``out_path + '.txt'`` holding the value range."""
    img, (lo, hi) = to_gray(face_slice(cube, variable, face, at))
    write_pgm(img, out_path)
    Path(str(out_path) + ".txt").write_text(f"variable {variable}\nface {face}\nmin {lo!r}\nmax {hi!r}\n")
    return img
