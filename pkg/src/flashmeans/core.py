"""Core types and dense-math primitives shared by every engine stage.

Datasets are batch-major, row-major blocks of shape (batch, points, dims):
B independent clustering problems with common sizes. Element type is
float32 ("single") or float64 ("double"). Cluster statistics and objective
values always accumulate in float64 regardless of the data precision.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from . import _kernels

if TYPE_CHECKING:
    from .flash_assign import TilingConfig

PRECISIONS = ("single", "double")
_PRECISION_DTYPES = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}
_DTYPE_PRECISIONS = {v: k for k, v in _PRECISION_DTYPES.items()}

INIT_METHODS = ("random_distinct", "kmeanspp")
EMPTY_CLUSTER_POLICIES = ("keep", "reseed_farthest")


class DataFormatError(Exception):
    """Malformed or internally inconsistent on-disk input."""


class ResourceLimitError(RuntimeError):
    """An allocation would exceed the configured memory cap."""


def dtype_for(precision: str) -> np.dtype:
    try:
        return _PRECISION_DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {PRECISIONS}") from None


def precision_for(dtype) -> str:
    try:
        return _DTYPE_PRECISIONS[np.dtype(dtype)]
    except KeyError:
        raise ValueError(f"unsupported element type {dtype!r}") from None


def elem_bytes(precision: str) -> int:
    return dtype_for(precision).itemsize


def worker_count(override: int | None = None) -> int:
    """Resolve the worker count: explicit argument, then FLASHMEANS_WORKERS, then CPU count."""
    if override is not None:
        if int(override) < 1:
            raise ValueError("worker count must be >= 1")
        return int(override)
    env = os.environ.get("FLASHMEANS_WORKERS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"FLASHMEANS_WORKERS must be an integer, got {env!r}") from None
        if value < 1:
            raise ValueError("FLASHMEANS_WORKERS must be >= 1")
        return value
    return os.cpu_count() or 1


_alloc_limit: int | None = None


def set_alloc_limit(limit: int | None) -> None:
    """Cap subsequent engine allocations at ``limit`` bytes (None lifts the cap)."""
    global _alloc_limit
    if limit is not None and int(limit) < 0:
        raise ValueError("allocation limit must be non-negative")
    _alloc_limit = None if limit is None else int(limit)


def alloc_dense(shape, dtype) -> np.ndarray:
    """Allocate a dense buffer, enforcing the configured memory cap."""
    nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if _alloc_limit is not None and nbytes > _alloc_limit:
        raise ResourceLimitError(
            f"allocation of {nbytes} bytes exceeds the {_alloc_limit}-byte limit"
        )
    return np.empty(shape, dtype=dtype)


def _validate_block(data: np.ndarray, name: str) -> np.ndarray:
    if not isinstance(data, np.ndarray) or data.ndim != 3:
        raise ValueError(f"{name} must be a 3-d array (batch, rows, dims)")
    if min(data.shape) < 1:
        raise ValueError(f"{name} dimensions must all be >= 1, got {data.shape}")
    if data.dtype not in _DTYPE_PRECISIONS:
        raise ValueError(f"{name} must be float32 or float64, got {data.dtype}")
    if not data.flags.c_contiguous:
        raise ValueError(f"{name} must be row-major contiguous")
    if not np.isfinite(data).all():
        raise ValueError(f"{name} contains non-finite entries")
    return data


@dataclass
class DataMatrix:
    """A batch of dense point sets, shape (batch, points, dims)."""

    data: np.ndarray

    def __post_init__(self):
        _validate_block(self.data, "DataMatrix")

    @classmethod
    def from_array(cls, arr, precision: str | None = None) -> "DataMatrix":
        arr = np.asarray(arr)
        if precision is not None:
            arr = arr.astype(dtype_for(precision), copy=False)
        elif arr.dtype not in _DTYPE_PRECISIONS:
            arr = arr.astype(np.float64)
        return cls(np.ascontiguousarray(arr))

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def points(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]

    @property
    def precision(self) -> str:
        return precision_for(self.data.dtype)

    @property
    def elem_bytes(self) -> int:
        return self.data.dtype.itemsize


@dataclass
class Centroids:
    """Per-batch centroid blocks, shape (batch, clusters, dims)."""

    data: np.ndarray

    def __post_init__(self):
        _validate_block(self.data, "Centroids")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def clusters(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]

    @property
    def precision(self) -> str:
        return precision_for(self.data.dtype)

    def copy(self) -> "Centroids":
        return Centroids(self.data.copy())


@dataclass
class Assignments:
    """Cluster ids per point, shape (batch, points), int32, each id in [0, K)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 2:
            raise ValueError("Assignments must be a 2-d array (batch, points)")
        if v.dtype != np.int32:
            raise ValueError(f"Assignments must be int32, got {v.dtype}")
        if not v.flags.c_contiguous:
            raise ValueError("Assignments must be row-major contiguous")
        if v.size and v.min() < 0:
            raise ValueError("Assignments contain negative cluster ids")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def points(self) -> int:
        return self.values.shape[1]


@dataclass
class ClusterStats:
    """Per-cluster running sums (float64) and member counts (int64)."""

    sums: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.sums.ndim != 3 or self.sums.dtype != np.float64:
            raise ValueError("ClusterStats.sums must be (batch, clusters, dims) float64")
        if self.counts.shape != self.sums.shape[:2] or self.counts.dtype != np.int64:
            raise ValueError("ClusterStats.counts must be (batch, clusters) int64")

    @classmethod
    def zeros(cls, batch: int, clusters: int, dims: int) -> "ClusterStats":
        return cls(
            np.zeros((batch, clusters, dims), np.float64),
            np.zeros((batch, clusters), np.int64),
        )

    @property
    def batch(self) -> int:
        return self.sums.shape[0]

    @property
    def clusters(self) -> int:
        return self.sums.shape[1]

    @property
    def dims(self) -> int:
        return self.sums.shape[2]


@dataclass
class Counters:
    """Monotone instrumentation counters for a run; reset() zeroes them."""

    intermediate_bytes_written: int = 0
    intermediate_bytes_read: int = 0
    synchronized_merges: int = 0
    elements_streamed: int = 0

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class KMeansConfig:
    """Run configuration; tiling=None selects the cache-model heuristic."""

    clusters: int
    max_iters: int = 50
    shift_tol: float = 0.0
    seed: int = 0
    init: str = "random_distinct"
    empty_cluster_policy: str = "keep"
    tiling: "TilingConfig | None" = None
    precision: str = "double"

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (np.isfinite(self.shift_tol) and self.shift_tol >= 0.0):
            raise ValueError("shift_tol must be finite and >= 0")
        if self.init not in INIT_METHODS:
            raise ValueError(f"init must be one of {INIT_METHODS}")
        if self.empty_cluster_policy not in EMPTY_CLUSTER_POLICIES:
            raise ValueError(f"empty_cluster_policy must be one of {EMPTY_CLUSTER_POLICIES}")
        dtype_for(self.precision)


@dataclass
class KMeansResult:
    """Outcome of a full run; objective_history has shape (iterations, batch)."""

    centroids: Centroids
    assignments: Assignments
    objective_history: np.ndarray
    iterations_run: int
    counters: Counters


def squared_distance(x, c) -> float:
    """Squared Euclidean distance in the direct difference form (float64)."""
    x = np.asarray(x, np.float64)
    c = np.asarray(c, np.float64)
    if x.shape != c.shape or x.ndim != 1:
        raise ValueError("squared_distance expects two equal-length vectors")
    diff = x - c
    return float(diff @ diff)


def expanded_distance(x_norm: float, c_norm: float, dot: float) -> float:
    """Squared distance via the norm expansion, clamped at zero."""
    v = x_norm + c_norm - 2.0 * dot
    return v if v > 0.0 else 0.0


def row_norms(m) -> np.ndarray:
    """Squared L2 norm of each row.

    Accumulates in float64 over ascending feature index and rounds once to
    the input dtype, so results feed the distance kernels reproducibly.
    """
    m = np.ascontiguousarray(m)
    if m.ndim != 2 or m.dtype not in _DTYPE_PRECISIONS:
        raise ValueError("row_norms expects a 2-d float32/float64 matrix")
    out = np.empty(m.shape[0], np.float64)
    _kernels.row_norms_acc(m, out)
    return out.astype(m.dtype, copy=False)


def _check_assignment_ids(a: Assignments, clusters: int) -> None:
    if a.values.size and int(a.values.max()) >= clusters:
        raise ValueError(
            f"assignment ids must be < {clusters}, found {int(a.values.max())}"
        )


def kmeans_objective(x: DataMatrix, c: Centroids, a: Assignments) -> np.ndarray:
    """Exact per-batch sum of squared distances to assigned centroids (float64)."""
    if x.batch != c.batch or x.batch != a.batch or x.dims != c.dims:
        raise ValueError("batch shapes of data, centroids and assignments disagree")
    if a.points != x.points:
        raise ValueError("assignment length does not match point count")
    _check_assignment_ids(a, c.clusters)
    out = np.empty(x.batch, np.float64)
    for b in range(x.batch):
        diff = x.data[b].astype(np.float64) - c.data[b].astype(np.float64)[a.values[b]]
        out[b] = float(np.einsum("ij,ij->", diff, diff))
    return out


def _kmeanspp_indices(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p64 = points.astype(np.float64, copy=False)
    n = p64.shape[0]
    idx = np.empty(k, np.int64)
    idx[0] = rng.integers(n)
    min_d2 = np.square(p64 - p64[idx[0]]).sum(axis=1)
    for j in range(1, k):
        total = float(min_d2.sum())
        if total > 0.0:
            choice = int(rng.choice(n, p=min_d2 / total))
        else:
            # all remaining mass is zero (duplicate points); fall back to uniform
            choice = int(rng.integers(n))
        idx[j] = choice
        np.minimum(min_d2, np.square(p64 - p64[choice]).sum(axis=1), out=min_d2)
    return idx


def init_centroids(
    x: DataMatrix, clusters: int, seed: int, method: str = "random_distinct"
) -> Centroids:
    """Seeded centroid initialization; bitwise deterministic per (data, K, seed, method).

    Batch elements draw from independent substreams keyed by (seed, batch index).
    """
    if method not in INIT_METHODS:
        raise ValueError(f"init method must be one of {INIT_METHODS}")
    if clusters < 1:
        raise ValueError("clusters must be >= 1")
    if clusters > x.points:
        raise ValueError(f"cannot place {clusters} clusters with only {x.points} points")
    out = np.empty((x.batch, clusters, x.dims), x.data.dtype)
    for b in range(x.batch):
        rng = np.random.default_rng((seed, b))
        if method == "random_distinct":
            idx = rng.choice(x.points, size=clusters, replace=False)
        else:
            idx = _kmeanspp_indices(x.data[b], clusters, rng)
        out[b] = x.data[b][idx]
    return Centroids(out)


def generate_dataset(
    batch: int,
    points: int,
    k_true: int,
    dims: int,
    spread: float,
    seed: int,
    precision: str = "double",
) -> DataMatrix:
    """Gaussian blob mixture: k_true uniform centers, isotropic noise of the given spread."""
    if min(batch, points, dims) < 1:
        raise ValueError("batch, points and dims must all be >= 1")
    if not 1 <= k_true <= points:
        raise ValueError("k_true must lie in [1, points]")
    if not (np.isfinite(spread) and spread >= 0.0):
        raise ValueError("spread must be finite and >= 0")
    dtype = dtype_for(precision)
    out = np.empty((batch, points, dims), np.float64)
    for b in range(batch):
        rng = np.random.default_rng((seed, b))
        centers = rng.uniform(-10.0, 10.0, size=(k_true, dims))
        labels = rng.integers(0, k_true, size=points)
        pts = centers[labels]
        if spread > 0.0:
            pts = pts + rng.standard_normal((points, dims)) * spread
        out[b] = pts
    return DataMatrix(np.ascontiguousarray(out.astype(dtype)))
