"""Run drivers: the in-core Lloyd loop and the chunked out-of-core variant.

Both drivers share termination semantics so a streaming run reproduces the
in-core run decision-for-decision: stop when assignments repeat, when the
largest centroid shift falls to shift_tol, or at max_iters. The streaming
pass keeps exactly two chunk buffers resident and overlaps ingestion of
chunk t+1 with compute on chunk t through a single ingest thread.
"""

from __future__ import annotations

import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baseline import (
    argmin_rows,
    compute_distance_matrix,
    gather_assigned_distances,
    normalize,
    scatter_update,
)
from .core import (
    INIT_METHODS,
    Assignments,
    Centroids,
    ClusterStats,
    Counters,
    DataFormatError,
    DataMatrix,
    KMeansConfig,
    KMeansResult,
    dtype_for,
    init_centroids,
    worker_count,
)
from .fileio import FKM1_HEADER_BYTES, AssignmentStore, read_fkm1_header
from .flash_assign import TilingConfig, flash_assign
from .sort_inverse import sort_inverse_update
from .tuner import CacheModel, ProblemShape, heuristic_config

__all__ = [
    "ChunkStream",
    "PartialStats",
    "lloyd_run",
    "out_of_core_iteration",
    "chunked_stream_run",
]

ENGINES = ("flash", "baseline")


def _resolve_tiling(
    cfg: KMeansConfig, points: int, dims: int, batch: int, elem: int, workers: int
) -> TilingConfig:
    if cfg.tiling is not None:
        return cfg.tiling
    shape = ProblemShape(points=points, clusters=cfg.clusters, dims=dims, batch=batch)
    return heuristic_config(shape, CacheModel(elem_bytes=elem, workers=workers))


def _objective_row(mind: np.ndarray) -> np.ndarray:
    return np.array(
        [np.sum(mind[b], dtype=np.float64) for b in range(mind.shape[0])], np.float64
    )


def _max_shift(old: Centroids, new: Centroids) -> float:
    diff = new.data.astype(np.float64) - old.data.astype(np.float64)
    return float(np.sqrt(np.square(diff).sum(axis=2).max()))


def _farthest_order(mind_b: np.ndarray) -> np.ndarray:
    """Point indices by decreasing assigned distance, ties to the lowest index."""
    v = mind_b.astype(np.float64, copy=False)
    return np.lexsort((np.arange(v.size), -v))


def _reseed_in_core(new_c: Centroids, empties, x: DataMatrix, mind: np.ndarray) -> None:
    """Overwrite each empty cluster with the next-farthest point, in id order."""
    for b in range(new_c.batch):
        if not empties[b]:
            continue
        order = _farthest_order(mind[b])
        for slot, cid in enumerate(empties[b]):
            new_c.data[b, cid] = x.data[b, int(order[slot])]


def _assign(x, c, tiling, counters, engine, workers):
    if engine == "flash":
        a, mind, _ = flash_assign(x, c, tiling, counters, workers=workers)
        return a, mind
    d = compute_distance_matrix(x, c, counters)
    a = argmin_rows(d)
    return a, gather_assigned_distances(d, a)


def _update(x, a, clusters, tiling, counters, engine, workers) -> ClusterStats:
    if engine == "flash":
        stats, _ = sort_inverse_update(
            x, a, clusters, tiling.update_chunk, counters, workers=workers
        )
        return stats
    return scatter_update(x, a, clusters, counters)


def lloyd_run(
    x: DataMatrix,
    cfg: KMeansConfig,
    engine: str = "flash",
    workers: int | None = None,
    counters: Counters | None = None,
) -> KMeansResult:
    """Full in-core run with either engine; exact mode keeps them bitwise equal.

    objective_history[i, b] is the float64 sum of assigned squared distances
    observed by iteration i's assignment step, so it is non-increasing.
    """
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}")
    counters = counters if counters is not None else Counters()
    n_workers = worker_count(workers)
    c = init_centroids(x, cfg.clusters, cfg.seed, cfg.init)
    tiling = _resolve_tiling(cfg, x.points, x.dims, x.batch, x.elem_bytes, n_workers)

    history: list[np.ndarray] = []
    prev: Assignments | None = None
    a: Assignments | None = None
    iterations = 0
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        a, mind = _assign(x, c, tiling, counters, engine, n_workers)
        history.append(_objective_row(mind))
        if prev is not None and np.array_equal(prev.values, a.values):
            break  # the update would reproduce c bitwise
        stats = _update(x, a, cfg.clusters, tiling, counters, engine, n_workers)
        new_c, empties = normalize(stats, c, cfg.empty_cluster_policy)
        if cfg.empty_cluster_policy == "reseed_farthest":
            _reseed_in_core(new_c, empties, x, mind)
        shift = _max_shift(c, new_c)
        prev, c = a, new_c
        if shift <= cfg.shift_tol:
            break
    return KMeansResult(c, a, np.array(history), iterations, counters)


class ChunkStream:
    """Chunk-granular reader over an FKM1 dataset that never loads it whole.

    Rows land directly in caller-supplied buffers (readinto), so a run's
    resident data is bounded by the buffers it allocates, not by N. One
    read executes at a time; a lock keeps the seek+read pair atomic.
    """

    def __init__(self, path: str, chunk_points: int):
        if int(chunk_points) < 1:
            raise ValueError("chunk_points must be >= 1")
        header = read_fkm1_header(path)
        self.path = path
        self.batch = header.batch
        self.total_points = header.points
        self.dims = header.dims
        self.precision = header.precision
        self.elem_bytes = header.elem_bytes
        self.chunk_points = min(int(chunk_points), header.points)
        self._row_bytes = self.dims * self.elem_bytes
        self._f = None
        self._lock = threading.Lock()

    @property
    def dtype(self) -> np.dtype:
        return dtype_for(self.precision)

    @property
    def n_chunks(self) -> int:
        return -(-self.total_points // self.chunk_points)

    def bounds(self, t: int) -> tuple[int, int]:
        if not 0 <= t < self.n_chunks:
            raise ValueError(f"chunk index {t} out of range")
        lo = t * self.chunk_points
        return lo, min(self.total_points, lo + self.chunk_points)

    def _handle(self):
        if self._f is None:
            # raw handle: readinto fills caller buffers directly, and EOF is
            # observed immediately if the file shrinks under a running job
            self._f = open(self.path, "rb", buffering=0)
        return self._f

    def read_rows_into(self, b: int, lo: int, hi: int, out: np.ndarray) -> np.ndarray:
        """Read rows [lo, hi) of batch element b into out; returns the filled view."""
        rows = hi - lo
        if not 0 <= b < self.batch or not 0 <= lo < hi <= self.total_points:
            raise ValueError("row range outside the stream bounds")
        if out.ndim != 2 or out.shape[0] < rows or out.shape[1] != self.dims:
            raise ValueError("destination buffer is too small for the requested rows")
        if out.dtype != self.dtype or not out.flags.c_contiguous:
            raise ValueError("destination buffer must match the stream dtype, row-major")
        view = out[:rows]
        nbytes = rows * self._row_bytes
        mv = memoryview(view).cast("B")
        with self._lock:
            f = self._handle()
            f.seek(FKM1_HEADER_BYTES + (b * self.total_points + lo) * self._row_bytes)
            got = 0
            while got < nbytes:  # raw readinto may return partial counts
                n = f.readinto(mv[got:])
                if not n:
                    break
                got += n
        if got != nbytes:
            raise DataFormatError(f"short read: wanted {nbytes} bytes, got {got}")
        if sys.byteorder != "little":
            view.byteswap(inplace=True)
        return view

    def read_rows(self, b: int, lo: int, hi: int) -> np.ndarray:
        out = np.empty((hi - lo, self.dims), self.dtype)
        return self.read_rows_into(b, lo, hi, out)

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self) -> "ChunkStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class PartialStats:
    """One chunk's cluster sums/counts; combined in ascending chunk order."""

    chunk_index: int
    sums: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.sums.ndim != 2 or self.sums.dtype != np.float64:
            raise ValueError("PartialStats.sums must be (clusters, dims) float64")
        if self.counts.shape != self.sums.shape[:1] or self.counts.dtype != np.int64:
            raise ValueError("PartialStats.counts must be (clusters,) int64")

    def combine(self, other: "PartialStats") -> "PartialStats":
        if self.sums.shape != other.sums.shape:
            raise ValueError("cannot combine partials of different shapes")
        return PartialStats(
            min(self.chunk_index, other.chunk_index),
            self.sums + other.sums,
            self.counts + other.counts,
        )


def _alloc_chunk_buffers(chunk_points: int, dims: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """The streaming pass's only chunk-sized allocations: two ingest buffers."""
    return (
        np.empty((chunk_points, dims), dtype),
        np.empty((chunk_points, dims), dtype),
    )


def _ingest_chunk(stream: ChunkStream, b: int, t: int, buf: np.ndarray) -> int:
    """Pull chunk t of batch element b into buf; returns the row count."""
    lo, hi = stream.bounds(t)
    stream.read_rows_into(b, lo, hi, buf)
    return hi - lo


def _chunk_matrix(view: np.ndarray) -> DataMatrix:
    try:
        return DataMatrix(view[None])
    except ValueError as e:
        raise DataFormatError(f"bad chunk payload: {e}") from None


class _FarthestTracker:
    """Running top-k (distance, index) candidates matching the in-core order.

    The global top-k under (distance desc, index asc) is contained in the
    union of per-chunk top-k prefixes, so merging chunk prefixes preserves
    exactly the points the in-core reseed would pick.
    """

    def __init__(self, k: int):
        self.k = k
        self.vals = np.empty(0, np.float64)
        self.idx = np.empty(0, np.int64)

    def offer(self, mind_chunk: np.ndarray, lo: int) -> None:
        rows = mind_chunk.size
        take = min(self.k, rows)
        if take < rows:
            part = np.argpartition(mind_chunk, rows - take)[rows - take :]
        else:
            part = np.arange(rows)
        v = np.concatenate([self.vals, mind_chunk[part].astype(np.float64)])
        i = np.concatenate([self.idx, lo + part.astype(np.int64)])
        order = np.lexsort((i, -v))[: self.k]
        self.vals, self.idx = v[order], i[order]

    def index_at(self, slot: int) -> int:
        return int(self.idx[slot])


def _streaming_pass(
    stream: ChunkStream,
    c: Centroids,
    clusters: int,
    policy: str,
    tiling: TilingConfig,
    counters: Counters,
    store: AssignmentStore,
    buffers: tuple[np.ndarray, np.ndarray],
    workers: int,
) -> tuple[Centroids, np.ndarray, bool]:
    """One full pass: per-chunk assign + aggregate, then normalize.

    Compute on chunk t overlaps ingestion of chunk t+1 via one ingest
    thread; the two buffers alternate so a read never lands in the chunk
    being computed. Partials merge in ascending chunk order, which keeps
    the pass bitwise reproducible for any chunk size.
    """
    batch, dims = stream.batch, stream.dims
    n_chunks = stream.n_chunks
    obj = np.zeros(batch, np.float64)
    changed = False
    sums = np.zeros((batch, clusters, dims), np.float64)
    counts = np.zeros((batch, clusters), np.int64)
    trackers: list[_FarthestTracker | None] = [None] * batch

    with ThreadPoolExecutor(max_workers=1) as ingest:
        for b in range(batch):
            tracker = _FarthestTracker(clusters) if policy == "reseed_farthest" else None
            trackers[b] = tracker
            c_b = Centroids(c.data[b : b + 1])
            running: PartialStats | None = None
            pending = ingest.submit(_ingest_chunk, stream, b, 0, buffers[0])
            for t in range(n_chunks):
                rows = pending.result()
                if t + 1 < n_chunks:
                    pending = ingest.submit(
                        _ingest_chunk, stream, b, t + 1, buffers[(t + 1) % 2]
                    )
                lo, _ = stream.bounds(t)
                counters.elements_streamed += rows
                chunk = _chunk_matrix(buffers[t % 2][:rows])
                a_c, mind, _ = flash_assign(chunk, c_b, tiling, counters, workers=workers)
                m = mind[0]
                obj[b] += float(np.sum(m, dtype=np.float64))
                changed |= store.write_chunk(b, lo, a_c.values[0])
                if tracker is not None:
                    tracker.offer(m, lo)
                st, _ = sort_inverse_update(
                    chunk, a_c, clusters, tiling.update_chunk, counters, workers=workers
                )
                part = PartialStats(t, st.sums[0], st.counts[0])
                running = part if running is None else running.combine(part)
            sums[b], counts[b] = running.sums, running.counts

    new_c, empties = normalize(ClusterStats(sums, counts), c, policy)
    if policy == "reseed_farthest":
        for b in range(batch):
            for slot, cid in enumerate(empties[b]):
                idx = trackers[b].index_at(slot)
                new_c.data[b, cid] = stream.read_rows(b, idx, idx + 1)[0]
    return new_c, obj, changed


def _check_stream_centroids(stream: ChunkStream, c: Centroids, clusters: int) -> None:
    if c.batch != stream.batch or c.dims != stream.dims:
        raise ValueError("centroids do not match the stream shape")
    if c.clusters != clusters:
        raise ValueError("centroid count does not match the configuration")
    if c.precision != stream.precision:
        raise ValueError("centroid precision does not match the stream")


def out_of_core_iteration(
    stream: ChunkStream,
    c: Centroids,
    cfg: KMeansConfig,
    counters: Counters,
    store: AssignmentStore | None = None,
    workers: int | None = None,
) -> tuple[Centroids, AssignmentStore, Counters]:
    """One streaming Lloyd iteration; the caller finalizes (or aborts) the store.

    With a fresh store the default output path is "<dataset>.fka1". The
    returned centroids equal the in-core iteration's bitwise for
    single-precision data.
    """
    n_workers = worker_count(workers)
    _check_stream_centroids(stream, c, cfg.clusters)
    tiling = _resolve_tiling(
        cfg, stream.total_points, stream.dims, stream.batch, stream.elem_bytes, n_workers
    )
    own_store = store is None
    if store is None:
        store = AssignmentStore(stream.path + ".fka1", stream.batch, stream.total_points)
    buffers = _alloc_chunk_buffers(stream.chunk_points, stream.dims, stream.dtype)
    try:
        new_c, _, _ = _streaming_pass(
            stream, c, cfg.clusters, cfg.empty_cluster_policy, tiling, counters,
            store, buffers, n_workers,
        )
    except BaseException:
        if own_store:
            store.abort()
        raise
    return new_c, store, counters


def _streaming_kmeanspp(
    stream: ChunkStream, b: int, k: int, rng: np.random.Generator, buf: np.ndarray
) -> np.ndarray:
    """D^2-weighted seeding over the stream; only an (N,) float64 table stays resident.

    Distances are per-point and the weight table lives in memory, so the
    drawn indices match the in-core seeding bitwise.
    """
    n = stream.total_points
    idx = np.empty(k, np.int64)
    idx[0] = rng.integers(n)
    min_d2 = np.empty(n, np.float64)

    def sweep(center_row: np.ndarray, first: bool) -> None:
        center = center_row.astype(np.float64)
        for t in range(stream.n_chunks):
            lo, hi = stream.bounds(t)
            view = stream.read_rows_into(b, lo, hi, buf)
            d2 = np.square(view.astype(np.float64) - center).sum(axis=1)
            if first:
                min_d2[lo:hi] = d2
            else:
                np.minimum(min_d2[lo:hi], d2, out=min_d2[lo:hi])

    sweep(stream.read_rows(b, int(idx[0]), int(idx[0]) + 1)[0], first=True)
    for j in range(1, k):
        total = float(min_d2.sum())
        if total > 0.0:
            choice = int(rng.choice(n, p=min_d2 / total))
        else:
            choice = int(rng.integers(n))
        idx[j] = choice
        sweep(stream.read_rows(b, choice, choice + 1)[0], first=False)
    return idx


def _init_from_stream(
    stream: ChunkStream, clusters: int, seed: int, method: str, buf: np.ndarray
) -> Centroids:
    """Seeded initialization reading only centroid rows (plus k-means++ sweeps).

    Draws the same row indices as the in-core initializer for the same
    (data, clusters, seed, method), so the two paths start bitwise equal.
    """
    if method not in INIT_METHODS:
        raise ValueError(f"init method must be one of {INIT_METHODS}")
    if clusters > stream.total_points:
        raise ValueError(
            f"cannot place {clusters} clusters with only {stream.total_points} points"
        )
    out = np.empty((stream.batch, clusters, stream.dims), stream.dtype)
    for b in range(stream.batch):
        rng = np.random.default_rng((seed, b))
        if method == "random_distinct":
            idx = rng.choice(stream.total_points, size=clusters, replace=False)
        else:
            idx = _streaming_kmeanspp(stream, b, clusters, rng, buf)
        for j, i in enumerate(idx):
            out[b, j] = stream.read_rows(b, int(i), int(i) + 1)[0]
    return Centroids(out)


def chunked_stream_run(
    stream: ChunkStream,
    cfg: KMeansConfig,
    assign_path: str | None = None,
    workers: int | None = None,
    counters: Counters | None = None,
) -> KMeansResult:
    """Full out-of-core run; assignments persist chunk-wise to an FKA1 file.

    Mirrors lloyd_run's decisions exactly: the store's changed flag stands
    in for the assignment-repeat test and centroid shifts are computed from
    the same float64 expression, so iteration counts and (for
    single-precision data) final centroids match the in-core run bitwise.
    The FKA1 file lands at assign_path, default "<dataset>.fka1".
    """
    counters = counters if counters is not None else Counters()
    n_workers = worker_count(workers)
    if cfg.clusters > stream.total_points:
        raise ValueError("more clusters than points in the stream")
    buffers = _alloc_chunk_buffers(stream.chunk_points, stream.dims, stream.dtype)
    c = _init_from_stream(stream, cfg.clusters, cfg.seed, cfg.init, buffers[0])
    tiling = _resolve_tiling(
        cfg, stream.total_points, stream.dims, stream.batch, stream.elem_bytes, n_workers
    )
    store = AssignmentStore(
        assign_path or stream.path + ".fka1", stream.batch, stream.total_points
    )
    history: list[np.ndarray] = []
    iterations = 0
    try:
        for it in range(1, cfg.max_iters + 1):
            iterations = it
            new_c, obj, changed = _streaming_pass(
                stream, c, cfg.clusters, cfg.empty_cluster_policy, tiling, counters,
                store, buffers, n_workers,
            )
            history.append(obj)
            if not changed:
                break  # assignments repeated; the update would reproduce c
            shift = _max_shift(c, new_c)
            c = new_c
            if shift <= cfg.shift_tol:
                break
        a = store.read_all()
        store.finalize()
    except BaseException:
        store.abort()
        raise
    return KMeansResult(c, a, np.array(history), iterations, counters)
