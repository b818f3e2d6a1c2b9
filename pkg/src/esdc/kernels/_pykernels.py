"""Pure-Python versions of the compiled kernels.

Arithmetic is performed in the same order as in ``_ckernels.pyx`` so both
backends agree bit for bit.
"""

import math

import numpy as np


def moments_update(values, weights, groups, wsum, comp, mean, mean_c, m2, count, vmin, vmax):
    xs = values.tolist()
    ws = weights.tolist()
    gs = groups.tolist()
    W = wsum.tolist()
    C = comp.tolist()
    M = mean.tolist()
    MC = mean_c.tolist()
    S = m2.tolist()
    N = count.tolist()
    lo = vmin.tolist()
    hi = vmax.tolist()
    for x, w, g in zip(xs, ws, gs):
        if x != x or w == 0.0:
            continue
        y = w - C[g]
        t = W[g] + y
        C[g] = (t - W[g]) - y
        W[g] = t
        total = t - C[g]
        delta = (x - M[g]) - MC[g]
        inc = (w / total) * delta
        s = M[g] + inc
        bb = s - M[g]
        MC[g] += (M[g] - (s - bb)) + (inc - bb)
        M[g] = s
        S[g] += w * delta * ((x - M[g]) - MC[g])
        if N[g] == 0:
            lo[g] = x
            hi[g] = x
        else:
            if x < lo[g]:
                lo[g] = x
            if x > hi[g]:
                hi[g] = x
        N[g] += 1
    wsum[:] = W
    comp[:] = C
    mean[:] = M
    mean_c[:] = MC
    m2[:] = S
    count[:] = N
    vmin[:] = lo
    vmax[:] = hi


def _neighbour_offsets(connectivity):
    offs = []
    for dt in (-1, 0):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dt == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                    continue
                if connectivity != 26 and (dt != 0) + (dy != 0) + (dx != 0) != 1:
                    continue
                offs.append((dt, dy, dx))
    return offs


def label3d(mask, connectivity):
    mask = np.asarray(mask, dtype=bool)
    T, Y, X = mask.shape
    labels = np.zeros((T, Y, X), dtype=np.int64)
    parent = [0]
    offs = _neighbour_offsets(connectivity)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    lab = labels.tolist()
    for t, y, x in zip(*np.nonzero(mask)):
        t, y, x = int(t), int(y), int(x)
        cur = 0
        for dt, dy, dx in offs:
            tt, yy, xx = t + dt, y + dy, x + dx
            if tt < 0 or yy < 0 or yy >= Y or xx < 0 or xx >= X:
                continue
            other = lab[tt][yy][xx]
            if other == 0:
                continue
            if cur == 0:
                cur = other
            else:
                a, b = find(cur), find(other)
                if a < b:
                    parent[b] = a
                elif b < a:
                    parent[a] = b
        if cur == 0:
            cur = len(parent)
            parent.append(cur)
        lab[t][y][x] = cur

    remap = {}
    n = 0
    for t, y, x in zip(*np.nonzero(mask)):
        root = find(lab[t][y][x])
        if root not in remap:
            n += 1
            remap[root] = n
        labels[t, y, x] = remap[root]
    return labels, n


def gapfill_rows(data, max_gap):
    R, T = data.shape
    for r in range(R):
        row = data[r].tolist()
        i = 0
        while i < T and math.isnan(row[i]):
            i += 1
        changed = False
        while i < T:
            if not math.isnan(row[i]):
                i += 1
                continue
            j = i
            while j < T and math.isnan(row[j]):
                j += 1
            if j >= T:
                break
            run = j - i
            if run <= max_gap:
                a, b = row[i - 1], row[j]
                for k in range(run):
                    row[i + k] = a + (b - a) * (float(k + 1) / float(run + 1))
                changed = True
            i = j
        if changed:
            data[r] = row
