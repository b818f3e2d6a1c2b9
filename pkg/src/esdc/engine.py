"""Split-apply-combine executor.

:func:`apply_split_combine` loops a user function over every index of the
*split* axes (all axes not consumed by the function).  Work is grouped by
stored chunk along the split axes so a chunk is decoded once per pass,
subdivided when a group would not fit the memory budget.  Workers write into
disjoint regions of a pre-allocated result, so the output does not depend on
scheduling.

:func:`reduce_streaming` is the one-pass variant for mergeable reductions:
every stored chunk is read exactly once and per-chunk partial accumulators
are merged in chunk-key order.
"""

from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BudgetTooSmall, ShapeMismatch, ValidationError
from .model import DataCube, Grid, stamp
from .stats import STATISTICS, MomentsArray

logger = logging.getLogger(__name__)

ITEMSIZE = 8


@dataclass
class ApplySpec:
    """What the applied function consumes and produces.

    ``input_dims`` are passed to the function in the order listed;
    ``output_grids`` describe the axes of the array it returns (empty for a
    scalar result).
    """

    input_dims: Sequence[str]
    output_grids: Sequence[Grid] = ()
    memory_budget_bytes: int = 256 * 2**20
    workers: int = 1

    @property
    def output_dims(self) -> Tuple[str, ...]:
        return tuple(g.name for g in self.output_grids)


@dataclass
class ExecutionReport:
    """Instrumentation filled in by the executors."""

    tasks: int = 0
    calls: int = 0
    chunk_reads: int = 0
    peak_resident_bytes: int = 0
    budget_bytes: int = 0
    read_keys: List[tuple] = field(default_factory=list)


class _MemoryGate:
    """Blocking byte budget shared by concurrently running tasks."""

    def __init__(self, budget: int):
        self.budget = budget
        self.in_use = 0
        self.peak = 0
        self._cv = threading.Condition()

    def acquire(self, n: int):
        with self._cv:
            while self.in_use + n > self.budget:
                self._cv.wait()
            self.in_use += n
            self.peak = max(self.peak, self.in_use)

    def release(self, n: int):
        with self._cv:
            self.in_use -= n
            self._cv.notify_all()


def _fit_extents(extents: Sequence[int], max_items: int) -> Tuple[int, ...]:
    """Largest row-major-friendly sub-block of ``extents`` holding <= max_items.

    Trailing axes are kept whole as long as possible.
    """
    out = [1] * len(extents)
    room = max_items
    for i in range(len(extents) - 1, -1, -1):
        take = min(extents[i], room)
        out[i] = max(take, 1)
        room //= out[i]
        if take < extents[i]:
            break
    return tuple(out)


def _blocks(shape, chunks):
    """Chunk-aligned blocks (origin, extent) over ``shape`` in C order."""
    grid = [range(0, n, c) for n, c in zip(shape, chunks)]
    for origin in itertools.product(*grid):
        yield origin, tuple(min(c, n - o) for o, c, n in zip(origin, chunks, shape))


def _pieces(origin, extent, piece):
    for sub in _blocks(extent, piece):
        o, e = sub
        yield tuple(a + b for a, b in zip(origin, o)), e


def apply_split_combine(
    cube: DataCube,
    f: Callable[[np.ndarray], np.ndarray],
    spec: ApplySpec,
    report: Optional[ExecutionReport] = None,
) -> DataCube:
    """Apply ``f`` to every sub-cube along ``spec.input_dims`` and recombine.

    The result has the split dimensions (in cube order) followed by
    ``spec.output_grids``, canonicalised.  ``f`` sees NA values unmodified.
    """
    for d in spec.input_dims:
        cube.axis(d)
    if len(set(spec.input_dims)) != len(spec.input_dims):
        raise ValidationError(f"duplicate input dimensions {list(spec.input_dims)}")
    split_axes = [i for i, d in enumerate(cube.dims) if d not in spec.input_dims]
    in_axes = [cube.axis(d) for d in spec.input_dims]
    for g in spec.output_grids:
        if g.name in [cube.dims[i] for i in split_axes]:
            raise ValidationError(f"output dimension {g.name!r} clashes with a split dimension")
    shape = cube.shape
    split_shape = tuple(shape[i] for i in split_axes)
    in_shape = tuple(shape[i] for i in in_axes)
    out_shape = tuple(len(g) for g in spec.output_grids)
    in_bytes = ITEMSIZE * int(np.prod(in_shape, dtype=np.int64))
    out_bytes = ITEMSIZE * int(np.prod(out_shape, dtype=np.int64))
    per_loop = in_bytes + out_bytes
    budget = int(spec.memory_budget_bytes)
    if per_loop > budget:
        raise BudgetTooSmall(f"one input slice + one output slice needs {per_loop} bytes, budget is {budget}")
    workers = max(1, int(spec.workers))
    max_loops = max(1, budget // per_loop // workers)

    split_chunks = tuple(cube.schema.chunk_shape[i] for i in split_axes)
    tasks = []
    for origin, extent in _blocks(split_shape, split_chunks):
        piece = _fit_extents(extent, max_loops)
        tasks.extend(_pieces(origin, extent, piece))

    gate = _MemoryGate(budget)
    counter = {"calls": 0}
    lock = threading.Lock()
    results = {}
    order = split_axes + in_axes

    def run(variable, arr_out, origin, extent):
        n = int(np.prod(extent, dtype=np.int64))
        need = n * per_loop
        gate.acquire(need)
        try:
            w_origin = [0] * len(shape)
            w_shape = list(shape)
            for ax, o, e in zip(split_axes, origin, extent):
                w_origin[ax], w_shape[ax] = o, e
            block = cube.read_window(variable, w_origin, w_shape).transpose(order)
            local = np.empty(tuple(extent) + out_shape)
            for idx in np.ndindex(*extent):
                r = np.asarray(f(block[idx]), dtype=np.float64)
                if r.shape != out_shape:
                    loop = tuple(o + i for o, i in zip(origin, idx))
                    raise ShapeMismatch(
                        f"function returned shape {r.shape}, expected {out_shape} at loop index {loop}", loop
                    )
                local[idx] = r
            region = tuple(slice(o, o + e) for o, e in zip(origin, extent))
            arr_out[region] = local
            with lock:
                counter["calls"] += n
        finally:
            gate.release(need)

    before = _read_counts(cube)
    for v in cube.variables:
        arr_out = np.empty(split_shape + out_shape)
        if workers == 1:
            for origin, extent in tasks:
                run(v, arr_out, origin, extent)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run, v, arr_out, o, e) for o, e in tasks]
                for fut in futures:
                    fut.result()
        results[v] = arr_out

    if report is not None:
        report.tasks = len(tasks) * len(cube.variables)
        report.calls = counter["calls"]
        report.peak_resident_bytes = gate.peak
        report.budget_bytes = budget
        report.chunk_reads = _read_counts(cube) - before

    grids = [cube.schema.grids[i] for i in split_axes] + list(spec.output_grids)
    chunks = list(split_chunks) + list(out_shape)
    out = DataCube.from_numpy(results, grids, chunks=chunks,
                              attrs=cube.attrs.restrict(cube.variables, [g.name for g in grids]))
    params = {
        "function": getattr(f, "__name__", type(f).__name__),
        "input_dims": list(spec.input_dims),
        "output_dims": list(spec.output_dims),
    }
    return stamp(out, "apply_split_combine", params)


def _read_counts(cube: DataCube) -> int:
    return sum(getattr(cube.array(v), "chunk_reads", 0) for v in cube.variables)


def _chunk_keys(cube: DataCube):
    return list(itertools.product(*[range(n) for n in cube.schema.chunk_grid()]))


def _reduce(
    cube: DataCube,
    dims: Sequence[str],
    reducer: Callable[[int], object] = MomentsArray,
    statistics: Sequence[str] = ("mean",),
    weights: Optional[np.ndarray] = None,
    workers: int = 1,
    report: Optional[ExecutionReport] = None,
) -> DataCube:
    red_axes = sorted(cube.axis(d) for d in dims)
    keep_axes = [i for i in range(len(cube.dims)) if i not in red_axes]
    shape = cube.shape
    chunks = cube.schema.chunk_shape
    out_shape = tuple(shape[i] for i in keep_axes)
    n_out = int(np.prod(out_shape, dtype=np.int64))
    for s in statistics:
        if reducer is MomentsArray and s not in STATISTICS:
            raise ValidationError(f"unknown statistic {s!r}; choose from {STATISTICS}")
    w_full = None if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), shape)
    keys = _chunk_keys(cube)

    def partial(variable, key):
        origin = tuple(k * c for k, c in zip(key, chunks))
        arr = cube.array(variable)
        if hasattr(arr, "read_chunk"):
            block = arr.read_chunk(key)
        else:
            ext = tuple(min(c, n - o) for c, n, o in zip(chunks, shape, origin))
            block = arr.read(origin, ext)
        ext = block.shape
        if w_full is None:
            w = np.ones(ext)
        else:
            w = w_full[tuple(slice(o, o + e) for o, e in zip(origin, ext))]
        local_shape = tuple(ext[i] for i in keep_axes)
        local_index = np.arange(int(np.prod(local_shape, dtype=np.int64))).reshape(local_shape)
        expand = [slice(None) if i in keep_axes else np.newaxis for i in range(len(shape))]
        groups = np.broadcast_to(local_index[tuple(expand)], ext)
        state = reducer(local_index.size)
        state.accumulate(block.ravel(), np.ascontiguousarray(w).ravel(), np.ascontiguousarray(groups).ravel())
        # global flat positions of the local accumulators
        if not keep_axes:
            return state, np.zeros(1, dtype=np.intp)
        glob = np.indices(local_shape).reshape(len(local_shape), -1)
        offs = np.array([origin[i] for i in keep_axes]).reshape(-1, 1)
        return state, np.ravel_multi_index(tuple(glob + offs), out_shape)

    before = _read_counts(cube)
    data = {}
    for v in cube.variables:
        total = reducer(n_out)
        if workers <= 1:
            for key in keys:
                state, at = partial(v, key)
                total.merge(state, at)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for state, at in pool.map(lambda k: partial(v, k), keys):
                    total.merge(state, at)
        fin = total.finalize()
        for j, s in enumerate(statistics):
            name = v if j == 0 else f"{v}_{s}"
            data[name] = np.asarray(fin[s]).reshape(out_shape)
    if report is not None:
        report.tasks = len(keys) * len(cube.variables)
        report.chunk_reads = _read_counts(cube) - before

    grids = [cube.schema.grids[i] for i in keep_axes]
    out_chunks = [chunks[i] for i in keep_axes]
    attrs = cube.attrs.restrict(cube.variables, [g.name for g in grids])
    for v in cube.variables:
        for j, s in enumerate(statistics[1:], start=1):
            attrs = attrs.update_variable(f"{v}_{s}", statistic=s, source_variable=v)
        attrs = attrs.update_variable(v, statistic=statistics[0])
    return DataCube.from_numpy(data, grids, chunks=out_chunks, attrs=attrs)


def reduce_streaming(
    cube: DataCube,
    dims: Sequence[str],
    reducer: Callable[[int], object] = MomentsArray,
    statistics: Sequence[str] = ("mean",),
    weights: Optional[np.ndarray] = None,
    workers: int = 1,
    report: Optional[ExecutionReport] = None,
) -> DataCube:
    """One pass over every stored chunk with mergeable accumulators.

    ``reducer(n)`` must return a state of ``n`` accumulators exposing
    ``accumulate(values, weights, groups)``, ``merge(other, at)`` and
    ``finalize() -> {statistic: array}``; :class:`~esdc.stats.MomentsArray`
    is the default.  Partial states are merged in C order of chunk keys, so
    the result is the same for any worker count.
    """
    for d in dims:
        cube.axis(d)
    out = _reduce(cube, dims, reducer, statistics, weights, workers, report)
    params = {"dims": list(dims), "statistics": list(statistics), "weighted": weights is not None}
    return stamp(out, "reduce_streaming", params)

