"""Compare the compiled and pure-Python kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 3] [--size small|large]

Every kernel is run on identical inputs under each available backend; the
outputs are checked for bitwise agreement before timings are reported.
"""

import argparse
import time

import numpy as np

from esdc import kernels

SIZES = {
    "small": {"moments": 200_000, "groups": 64, "label": (32, 64, 64), "gap": (256, 730)},
    "large": {"moments": 2_000_000, "groups": 1024, "label": (64, 128, 128), "gap": (4096, 730)},
}


def moments_case(n, g, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(n) + 1e6
    values[rng.random(n) < 0.05] = np.nan
    weights = rng.random(n) + 0.1
    groups = rng.integers(0, g, n).astype(np.int64)

    def run():
        state = [np.zeros(g) for _ in range(5)] + [np.zeros(g, dtype=np.int64)] + [np.zeros(g), np.zeros(g)]
        kernels.moments_update(values, weights, groups, *state)
        return state

    return run


def label_case(shape, seed=0):
    mask = (np.random.default_rng(seed).random(shape) < 0.3).astype(np.uint8)

    def run():
        return kernels.label3d(mask, 26)

    return run


def gapfill_case(shape, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape)
    data[rng.random(shape) < 0.2] = np.nan

    def run():
        d = data.copy()
        out = kernels.gapfill_rows(d, 5)
        return d if out is None else out

    return run


def flatten(result):
    if isinstance(result, (list, tuple)):
        return [np.asarray(r) for r in result]
    return [np.asarray(result)]


def timed(fn, repeat):
    best, result = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--size", choices=sorted(SIZES), default="small")
    args = p.parse_args(argv)
    s = SIZES[args.size]
    cases = {
        f"moments_update n={s['moments']}": moments_case(s["moments"], s["groups"]),
        f"label3d {s['label']}": label_case(s["label"]),
        f"gapfill_rows {s['gap']}": gapfill_case(s["gap"]),
    }
    backends = kernels.available_backends()
    previous = kernels.BACKEND
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':<36}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    try:
        for name, fn in cases.items():
            times, outputs = {}, {}
            for b in backends:
                kernels.use_backend(b)
                times[b], outputs[b] = timed(fn, args.repeat)
            ref = flatten(outputs[backends[0]])
            for b in backends[1:]:
                for x, y in zip(ref, flatten(outputs[b])):
                    if not np.array_equal(x, y, equal_nan=True):
                        raise SystemExit(f"{name}: backend {b} disagrees with {backends[0]}")
            row = f"{name:<36}" + "".join(f"{times[b] * 1e3:>10.1f}ms" for b in backends)
            if "cython" in times and "python" in times:
                row += f"{times['python'] / times['cython']:>9.1f}x"
            print(row)
    finally:
        kernels.use_backend(previous)


if __name__ == "__main__":
    main()
