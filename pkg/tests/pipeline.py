"""The end-to-end command line pipeline shared by the CLI and acceptance tests."""

import hashlib
import os
from pathlib import Path

from esdc.cli import main

FIXED = ["--fixed-time", "2024-01-01T00:00:00Z"]


def pipeline_steps(d: Path):
    d = str(d)
    j = os.path.join
    return [
        ["create", j(d, "raw.zarr"), "--preset", "seasonal-trend", "--seed", "3", "--chunks", "100,4,4",
         "--compression", "zlib"],
        ["resample", j(d, "raw.zarr"), j(d, "coarse.zarr"), "--target-grid", "45,90"],
        ["anomaly", j(d, "coarse.zarr"), j(d, "anom.zarr"), "--clim-window", "15", "--clim-out", j(d, "clim.zarr")],
        ["detect-events", j(d, "anom.zarr"), "--z", "2", "--standardise", "plain", "--out", j(d, "events.jsonl")],
        ["sample", j(d, "anom.zarr"), "--per-event", "2", "--events", j(d, "events.jsonl"), "--window", "3",
         "--time-pad", "3", "--seed", "1", "--out", j(d, "minicubes.jsonl")],
        ["sample", j(d, "anom.zarr"), "--n", "10", "--seed", "2", "--out", j(d, "points.jsonl")],
        ["cv-folds", j(d, "points.jsonl"), "--block", "45", "--k", "2", "--buffer", "30", "--out", j(d, "folds.jsonl")],
        ["stats", j(d, "anom.zarr"), "--over", "lat,lon", "--weighted", "--stat", "mean,var", "--out", j(d, "stats.zarr")],
        ["create", j(d, "blobs.zarr"), "--preset", "random-blobs", "--seed", "7"],
        ["detect-events", j(d, "blobs.zarr"), "--z", "9", "--out", j(d, "blob_events.jsonl")],
        ["render", j(d, "anom.zarr"), "--face", "hovmoeller", "--at", "1", "--out", j(d, "hov.pgm")],
        ["render", j(d, "blobs.zarr"), "--face", "map", "--at", "4", "--out", j(d, "map.pgm")],
    ]


def run_pipeline(d: Path, workers: int = 1):
    d.mkdir(parents=True, exist_ok=True)
    for step in pipeline_steps(d):
        rc = main(FIXED + ["--workers", str(workers)] + step)
        if rc != 0:
            raise RuntimeError(f"step {step[0]} exited with {rc}")


def tree_digest(d: Path):
    """Relative path -> sha256 of every file below ``d``."""
    out = {}
    for p in sorted(Path(d).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
