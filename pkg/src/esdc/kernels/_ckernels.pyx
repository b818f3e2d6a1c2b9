# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport isnan

cnp.import_array()


def moments_update(const double[::1] values, const double[::1] weights, const cnp.intp_t[::1] groups,
                   double[::1] wsum, double[::1] comp, double[::1] mean, double[::1] mean_c, double[::1] m2,
                   cnp.int64_t[::1] count, double[::1] vmin, double[::1] vmax):
    """Stream ``values`` into per-group weighted moment accumulators, in order.

    NaN values and zero weights are skipped.  ``comp`` carries the Kahan
    correction of ``wsum`` (true sum = wsum - comp) and the mean is held as
    the unevaluated sum ``mean + mean_c``, which keeps deviations exact for
    data far from zero.
    """
    cdef Py_ssize_t i, n = values.shape[0]
    cdef cnp.intp_t g
    cdef double x, w, y, t, total, delta, inc, s, bb
    for i in range(n):
        x = values[i]
        w = weights[i]
        if isnan(x) or w == 0.0:
            continue
        g = groups[i]
        y = w - comp[g]
        t = wsum[g] + y
        comp[g] = (t - wsum[g]) - y
        wsum[g] = t
        total = t - comp[g]
        delta = (x - mean[g]) - mean_c[g]
        inc = (w / total) * delta
        s = mean[g] + inc
        bb = s - mean[g]
        mean_c[g] += (mean[g] - (s - bb)) + (inc - bb)
        mean[g] = s
        m2[g] += w * delta * ((x - mean[g]) - mean_c[g])
        if count[g] == 0:
            vmin[g] = x
            vmax[g] = x
        else:
            if x < vmin[g]:
                vmin[g] = x
            if x > vmax[g]:
                vmax[g] = x
        count[g] += 1


cdef Py_ssize_t _find(cnp.int64_t[::1] parent, Py_ssize_t a) noexcept nogil:
    cdef Py_ssize_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


cdef void _union(cnp.int64_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label3d(const cnp.uint8_t[:, :, ::1] mask, int connectivity):
    """Two-pass union-find labelling of a (t, y, x) boolean mask.

    Labels are 1..n numbered by first appearance in C order; background is 0.
    """
    cdef Py_ssize_t T = mask.shape[0], Y = mask.shape[1], X = mask.shape[2]
    cdef Py_ssize_t N = T * Y * X
    labels_np = np.zeros((T, Y, X), dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] labels = labels_np
    parent_np = np.zeros(N + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] parent = parent_np
    cdef Py_ssize_t t, y, x, dt, dy, dx, tt, yy, xx, nxt = 1, cur, other
    cdef int full = connectivity == 26

    with nogil:
        for t in range(T):
            for y in range(Y):
                for x in range(X):
                    if not mask[t, y, x]:
                        continue
                    cur = 0
                    # previously visited neighbours in raster order
                    for dt in range(-1, 1):
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                if dt == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                                    continue
                                if not full and (dt != 0) + (dy != 0) + (dx != 0) != 1:
                                    continue
                                tt = t + dt
                                yy = y + dy
                                xx = x + dx
                                if tt < 0 or yy < 0 or yy >= Y or xx < 0 or xx >= X:
                                    continue
                                other = labels[tt, yy, xx]
                                if other == 0:
                                    continue
                                if cur == 0:
                                    cur = other
                                else:
                                    _union(parent, cur, other)
                    if cur == 0:
                        parent[nxt] = nxt
                        cur = nxt
                        nxt += 1
                    labels[t, y, x] = cur

    # resolve roots and renumber by first appearance
    remap_np = np.zeros(nxt, dtype=np.int64)
    cdef cnp.int64_t[::1] remap = remap_np
    cdef cnp.int64_t n = 0
    cdef Py_ssize_t root
    with nogil:
        for t in range(T):
            for y in range(Y):
                for x in range(X):
                    cur = labels[t, y, x]
                    if cur == 0:
                        continue
                    root = _find(parent, cur)
                    if remap[root] == 0:
                        n += 1
                        remap[root] = n
                    labels[t, y, x] = remap[root]
    return labels_np, int(n)


def gapfill_rows(double[:, ::1] data, Py_ssize_t max_gap):
    """Linearly fill interior NaN runs of length <= max_gap along axis 1, in place."""
    cdef Py_ssize_t r, i, j, k, run, R = data.shape[0], T = data.shape[1]
    cdef double a, b
    with nogil:
        for r in range(R):
            i = 0
            # skip the leading run
            while i < T and isnan(data[r, i]):
                i += 1
            while i < T:
                if not isnan(data[r, i]):
                    i += 1
                    continue
                j = i
                while j < T and isnan(data[r, j]):
                    j += 1
                if j >= T:
                    break
                run = j - i
                if run <= max_gap:
                    a = data[r, i - 1]
                    b = data[r, j]
                    for k in range(run):
                        data[r, i + k] = a + (b - a) * (<double>(k + 1) / <double>(run + 1))
                i = j
