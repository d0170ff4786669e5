"""Materializing baseline engine with honest traffic instrumentation.

One Lloyd iteration is four kernels: build the full (points x clusters)
distance matrix, re-read it for the row argmin, scatter every point into
shared accumulators, then normalize. The matrix is written and read back
in full, and every point performs one synchronized merge; the counters
record exactly that. This is the reference dataflow the fused engine is
measured against, and its oracle for assignments and statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import (
    Assignments,
    Centroids,
    ClusterStats,
    Counters,
    DataMatrix,
    alloc_dense,
    row_norms,
    _check_assignment_ids,
)

__all__ = [
    "DistanceMatrix",
    "compute_distance_matrix",
    "argmin_rows",
    "scatter_update",
    "normalize",
    "baseline_iteration",
    "gather_assigned_distances",
]


@dataclass
class DistanceMatrix:
    """Materialized (batch, points, clusters) distances plus the counters that track its traffic."""

    values: np.ndarray
    counters: Counters

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("DistanceMatrix must be (batch, points, clusters)")

    @property
    def nbytes(self) -> int:
        return int(self.values.size) * self.values.dtype.itemsize


def _check_pair(x: DataMatrix, c: Centroids) -> None:
    if x.batch != c.batch:
        raise ValueError("data and centroids have different batch sizes")
    if x.dims != c.dims:
        raise ValueError("data and centroids have different dims")
    if x.data.dtype != c.data.dtype:
        raise ValueError("data and centroids must share one precision")


def compute_distance_matrix(
    x: DataMatrix, c: Centroids, counters: Counters, dot_mode: str = "exact"
) -> DistanceMatrix:
    """Kernel 1: materialize every pairwise squared distance.

    dot_mode="exact" uses the canonical fixed-order kernel (the one the
    fused engine also uses, so entries agree bitwise); "fast" maps the
    expansion onto BLAS matmul for throughput benchmarking.
    """
    _check_pair(x, c)
    dt = x.data.dtype
    d_values = alloc_dense((x.batch, x.points, c.clusters), dt)
    for b in range(x.batch):
        xn = row_norms(x.data[b])
        cn = row_norms(c.data[b])
        if dot_mode == "exact":
            _kernels.dist_block(x.data[b], c.data[b], xn, cn, d_values[b])
        elif dot_mode == "fast":
            g = d_values[b]
            np.matmul(x.data[b], c.data[b].T, out=g)
            np.multiply(g, dt.type(-2.0), out=g)
            g += xn[:, None]
            g += cn[None, :]
            np.maximum(g, dt.type(0.0), out=g)
        else:
            raise ValueError("dot_mode must be 'exact' or 'fast'")
    counters.intermediate_bytes_written += x.batch * x.points * c.clusters * dt.itemsize
    return DistanceMatrix(d_values, counters)


def argmin_rows(d: DistanceMatrix) -> Assignments:
    """Kernel 2: read the matrix back and take each row's first minimizer."""
    a = np.ascontiguousarray(np.argmin(d.values, axis=2).astype(np.int32))
    d.counters.intermediate_bytes_read += d.nbytes
    return Assignments(a)


def gather_assigned_distances(d: DistanceMatrix, a: Assignments) -> np.ndarray:
    """Per-point distance to the assigned centroid, gathered from the matrix."""
    b_n = np.arange(d.values.shape[1])
    return np.stack([d.values[b, b_n, a.values[b]] for b in range(d.values.shape[0])])


def scatter_update(
    x: DataMatrix, a: Assignments, clusters: int, counters: Counters
) -> ClusterStats:
    """Kernel 3: per-point scatter into shared sums/counts.

    The merge stream is token-granular and linearizable: one synchronized
    merge per point, applied in ascending point order. Sums accumulate in
    float64 whatever the data precision.
    """
    if x.batch != a.batch or x.points != a.points:
        raise ValueError("data and assignments disagree on shape")
    _check_assignment_ids(a, clusters)
    stats = ClusterStats.zeros(x.batch, clusters, x.dims)
    for b in range(x.batch):
        _kernels.scatter_rows(x.data[b], a.values[b], stats.sums[b], stats.counts[b])
    counters.synchronized_merges += x.batch * x.points
    return stats


def normalize(
    stats: ClusterStats, prev: Centroids, policy: str = "keep"
) -> tuple[Centroids, list[list[int]]]:
    """Kernel 4: centroids = sums/counts, in the data precision.

    Empty clusters keep the previous row bitwise and are flagged in the
    returned per-batch id lists; the reseed_farthest policy is applied by
    the run driver, which owns the per-point distances it needs.
    """
    if policy not in ("keep", "reseed_farthest"):
        raise ValueError("policy must be 'keep' or 'reseed_farthest'")
    if stats.batch != prev.batch or stats.clusters != prev.clusters or stats.dims != prev.dims:
        raise ValueError("stats and previous centroids disagree on shape")
    out = np.empty_like(prev.data)
    empty: list[list[int]] = []
    for b in range(stats.batch):
        counts = stats.counts[b]
        filled = counts > 0
        means = np.empty((stats.clusters, stats.dims), np.float64)
        np.divide(stats.sums[b], counts[:, None], out=means, where=filled[:, None])
        out[b][filled] = means[filled].astype(prev.data.dtype)
        out[b][~filled] = prev.data[b][~filled]
        empty.append([int(k) for k in np.flatnonzero(~filled)])
    return Centroids(out), empty


def baseline_iteration(
    x: DataMatrix,
    c: Centroids,
    counters: Counters,
    policy: str = "keep",
    dot_mode: str = "exact",
) -> tuple[Assignments, Centroids, Counters]:
    """One full baseline Lloyd iteration (assign, aggregate, normalize)."""
    d = compute_distance_matrix(x, c, counters, dot_mode=dot_mode)
    a = argmin_rows(d)
    stats = scatter_update(x, a, c.clusters, counters)
    new_c, _ = normalize(stats, c, policy)
    return a, new_c, counters
