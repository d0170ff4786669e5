"""Compiled inner loops shared by the baseline and fused engines.

Every kernel here is deterministic for a given input. The default variants
fix the within-row accumulation order (ascending feature index, float64
accumulator, products in the data's precision), so a distance entry is a
pure function of its point row and centroid row and never depends on how
the surrounding matrix was tiled. That property is what makes the fused
engine bitwise-equal to the materializing baseline at matching precision.

``assign_tile_fast`` is the one relaxed-order variant: same formula, but
compiled with reassociation enabled so the feature loop may vectorize. It
exists for benchmarking and is held to a tolerance, not to bitwise equality.
"""

import numpy as np
from numba import njit

_JIT = {"cache": True, "nogil": True}


@njit(**_JIT)
def row_norms_acc(m, out):
    n, d = m.shape
    for i in range(n):
        acc = 0.0
        for j in range(d):
            v = m[i, j]
            acc += v * v
        out[i] = acc


@njit(**_JIT)
def dist_block(x, c, xn, cn, out):
    """Clamped norm-expansion distances for one point-tile/centroid-tile pair."""
    n, d = x.shape
    k = c.shape[0]
    for i in range(n):
        for kk in range(k):
            acc = 0.0
            for j in range(d):
                acc += x[i, j] * c[kk, j]
            v = (xn[i] + cn[kk]) - 2.0 * acc
            if v < 0.0:
                v = 0.0
            out[i, kk] = v


@njit(**_JIT)
def rowmin(block, out_min, out_arg):
    """Per-row minimum and first (lowest-index) minimizer of a tile block."""
    n, k = block.shape
    for i in range(n):
        bm = block[i, 0]
        ba = 0
        for kk in range(1, k):
            v = block[i, kk]
            if v < bm:
                bm = v
                ba = kk
        out_min[i] = bm
        out_arg[i] = ba


@njit(**_JIT)
def rowmin_merge(block, k_offset, m, a):
    """Fold one tile's row minima into the running argmin state.

    Strict less-than keeps the incumbent on ties; tiles are visited in
    ascending centroid order, so ties resolve to the lowest global index.
    """
    n, k = block.shape
    for i in range(n):
        bm = block[i, 0]
        ba = 0
        for kk in range(1, k):
            v = block[i, kk]
            if v < bm:
                bm = v
                ba = kk
        if bm < m[i]:
            m[i] = bm
            a[i] = k_offset + ba


@njit(**_JIT, fastmath=True)
def assign_tile_fast(x, c, xn, cn, k_offset, m, a):
    """Fused distance + running argmin, relaxed accumulation order."""
    n, d = x.shape
    k = c.shape[0]
    for i in range(n):
        mi = m[i]
        ai = a[i]
        for kk in range(k):
            acc = 0.0
            for j in range(d):
                acc += x[i, j] * c[kk, j]
            v = (xn[i] + cn[kk]) - 2.0 * acc
            if v < 0.0:
                v = 0.0
            if v < mi:
                mi = v
                ai = k_offset + kk
        m[i] = mi
        a[i] = ai


@njit(**_JIT)
def scatter_rows(x, a, sums, counts):
    """Serialized per-point merge stream into the shared accumulators."""
    n, d = x.shape
    for i in range(n):
        k = a[i]
        for j in range(d):
            sums[k, j] += x[i, j]
        counts[k] += 1


@njit(**_JIT)
def counting_sort(a, k, order, a_sorted):
    """Stable counting sort of cluster ids; fills the permutation and sorted keys."""
    n = a.shape[0]
    offsets = np.zeros(k + 1, dtype=np.int64)
    for i in range(n):
        offsets[a[i] + 1] += 1
    for j in range(k):
        offsets[j + 1] += offsets[j]
    for i in range(n):
        key = a[i]
        pos = offsets[key]
        order[pos] = i
        a_sorted[pos] = key
        offsets[key] += 1


@njit(**_JIT)
def segment_stats(keys, order, x, seg_keys, seg_sums, seg_counts):
    """Accumulate one sorted chunk into per-segment partials.

    ``keys``/``order`` are the chunk's slice of the sorted ids and of the
    sort permutation; rows of ``x`` are gathered through ``order`` so the
    point matrix itself is never permuted. Returns the segment count.
    """
    nloc = keys.shape[0]
    d = x.shape[1]
    s = -1
    prev = -1
    for t in range(nloc):
        key = keys[t]
        if key != prev:
            s += 1
            seg_keys[s] = key
            seg_counts[s] = 0
            for j in range(d):
                seg_sums[s, j] = 0.0
            prev = key
        row = order[t]
        for j in range(d):
            seg_sums[s, j] += x[row, j]
        seg_counts[s] += 1
    return s + 1


@njit(**_JIT)
def merge_segments(seg_keys, seg_sums, seg_counts, nseg, sums, counts):
    """Apply one synchronized merge per segment, in ascending segment order."""
    d = sums.shape[1]
    for s in range(nseg):
        k = seg_keys[s]
        for j in range(d):
            sums[k, j] += seg_sums[s, j]
        counts[k] += seg_counts[s]


def warmup():
    """Compile every kernel for both element types; keeps timing paths clean."""
    for dt in (np.float32, np.float64):
        x = np.asarray([[1.0, 2.0], [3.0, 4.0]], dtype=dt)
        c = np.asarray([[1.0, 0.0], [0.0, 1.0]], dtype=dt)
        xn = np.empty(2, np.float64)
        row_norms_acc(x, xn)
        xn = xn.astype(dt)
        cn = np.empty(2, np.float64)
        row_norms_acc(c, cn)
        cn = cn.astype(dt)
        block = np.empty((2, 2), dtype=dt)
        dist_block(x, c, xn, cn, block)
        m = np.full(2, np.inf, dtype=dt)
        a = np.full(2, -1, np.int32)
        rowmin(block, np.empty(2, dt), np.empty(2, np.int32))
        rowmin_merge(block, 0, m, a)
        assign_tile_fast(x, c, xn, cn, 0, m, a)
        ids = np.asarray([1, 0], np.int32)
        sums = np.zeros((2, 2), np.float64)
        counts = np.zeros(2, np.int64)
        scatter_rows(x, ids, sums, counts)
        order = np.empty(2, np.int64)
        a_sorted = np.empty(2, np.int32)
        counting_sort(ids, 2, order, a_sorted)
        seg_keys = np.empty(2, np.int32)
        seg_sums = np.empty((2, 2), np.float64)
        seg_counts = np.empty(2, np.int64)
        nseg = segment_stats(a_sorted, order, x, seg_keys, seg_sums, seg_counts)
        merge_segments(seg_keys, seg_sums, seg_counts, nseg, sums, counts)
