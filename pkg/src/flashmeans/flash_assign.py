"""Fused tiled assignment: online argmin over streamed centroid tiles.

The point range is cut into tiles of ``point_tile`` rows; each worker walks
the centroid set in tiles of ``centroid_tile`` rows through a two-slot
buffer (the next tile is fetched while the current one is consumed) and
folds per-tile row minima into a running (min_dist, min_index) state. The
(point_tile x centroid_tile) distance block is transient scratch: nothing
of point-by-centroid extent is ever written back, so the intermediate
traffic counters do not move. Ragged edge tiles are handled by slicing
(masking), never by padding.

Tie discipline everywhere: strict less-than with ascending centroid order,
so equal distances resolve to the lowest global centroid index and results
are bitwise identical for any tile shape.
"""

from __future__ import annotations

import threading
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Assignments, Centroids, Counters, DataMatrix, row_norms, worker_count

__all__ = [
    "TilingConfig",
    "ArgminState",
    "online_argmin_merge",
    "tile_distances",
    "flash_assign",
]


@dataclass(frozen=True)
class TilingConfig:
    """Tile and chunk sizes; values are clamped to the bound problem on use."""

    point_tile: int
    centroid_tile: int
    update_chunk: int

    def __post_init__(self):
        for name in ("point_tile", "centroid_tile", "update_chunk"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def clamped(self, points: int, clusters: int) -> "TilingConfig":
        return TilingConfig(
            point_tile=min(int(self.point_tile), points),
            centroid_tile=min(int(self.centroid_tile), clusters),
            update_chunk=min(int(self.update_chunk), points),
        )

    def working_set_bytes(self, dims: int, elem_bytes: int) -> int:
        """Modeled transient bytes per worker: both tiles plus the block."""
        return (
            self.point_tile * dims + self.centroid_tile * dims
            + self.point_tile * self.centroid_tile
        ) * elem_bytes


@dataclass
class ArgminState:
    """Running per-point minimum and its centroid id; (+inf, -1) until the first merge."""

    min_dist: np.ndarray
    min_index: np.ndarray

    @classmethod
    def fresh(cls, points: int, dtype) -> "ArgminState":
        return cls(
            np.full(points, np.inf, dtype=dtype),
            np.full(points, -1, dtype=np.int32),
        )


def online_argmin_merge(
    state: ArgminState, tile_min, tile_argmin, k_offset: int
) -> ArgminState:
    """Merge one tile's row minima into the running state.

    Strict less-than keeps the incumbent, so with tiles visited in ascending
    centroid order ties resolve to the lowest global index. The fresh
    (+inf, -1) state loses every comparison, so the first merge always wins.
    """
    tile_min = np.asarray(tile_min)
    tile_argmin = np.asarray(tile_argmin)
    upd = tile_min < state.min_dist
    state.min_dist[upd] = tile_min[upd]
    state.min_index[upd] = tile_argmin[upd].astype(np.int32) + np.int32(k_offset)
    return state


def tile_distances(x_tile, c_tile, x_norms, c_norms, out=None):
    """One transient distance block plus its per-row minima.

    Returns (block, tile_min, tile_argmin). The block uses the canonical
    fixed accumulation order; callers may pass scratch via ``out`` and must
    not let the block outlive the tile step.
    """
    x_tile = np.asarray(x_tile)
    c_tile = np.asarray(c_tile)
    n, d = x_tile.shape
    k = c_tile.shape[0]
    if c_tile.shape[1] != d:
        raise ValueError("point and centroid tiles disagree on dims")
    if x_tile.dtype != c_tile.dtype:
        raise ValueError("tiles must share one precision")
    block = np.empty((n, k), x_tile.dtype) if out is None else out[:n, :k]
    _kernels.dist_block(x_tile, c_tile, x_norms, c_norms, block)
    tile_min = np.empty(n, x_tile.dtype)
    tile_argmin = np.empty(n, np.int32)
    _kernels.rowmin(block, tile_min, tile_argmin)
    return block, tile_min, tile_argmin


def _take_x_tile(x_b: np.ndarray, i0: int, i1: int) -> np.ndarray:
    """Hand one point tile to a worker (zero-copy; seam for access-counting shims)."""
    return x_b[i0:i1]


def _load_c_tile(c_b: np.ndarray, cn_b: np.ndarray, k0: int, k1: int):
    """Produce one centroid tile for the two-slot buffer (zero-copy in-core)."""
    return c_b[k0:k1], cn_b[k0:k1], k0


def _new_scratch(point_tile: int, centroid_tile: int, dtype) -> np.ndarray:
    """Per-worker transient block buffer (seam for allocation-tracking shims)."""
    return np.empty((point_tile, centroid_tile), dtype)


def flash_assign(
    x: DataMatrix,
    c: Centroids,
    tiling: TilingConfig,
    counters: Counters,
    dot_mode: str = "exact",
    workers: int | None = None,
    prefetch_executor: Executor | None = None,
) -> tuple[Assignments, np.ndarray, Counters]:
    """Assign every point to its nearest centroid without materializing distances.

    Returns (assignments, min_dists, counters); min_dists holds the squared
    distance to the chosen centroid, in the data precision. Assignments are
    bitwise identical to the baseline's argmin at matching precision when
    dot_mode="exact" (the default); "fast" permits reassociated accumulation
    and is intended for throughput measurements.
    """
    if x.batch != c.batch or x.dims != c.dims:
        raise ValueError("data and centroids disagree on batch or dims")
    if x.data.dtype != c.data.dtype:
        raise ValueError("data and centroids must share one precision")
    if dot_mode not in ("exact", "fast"):
        raise ValueError("dot_mode must be 'exact' or 'fast'")
    eff = tiling.clamped(x.points, c.clusters)
    bn, bk = eff.point_tile, eff.centroid_tile
    n_workers = worker_count(workers)

    a_out = np.empty((x.batch, x.points), np.int32)
    m_out = np.empty((x.batch, x.points), x.data.dtype)
    scratch_map: dict[int, np.ndarray] = {}

    norms = [(row_norms(x.data[b]), row_norms(c.data[b])) for b in range(x.batch)]
    c_tiles = [(k0, min(k0 + bk, c.clusters)) for k0 in range(0, c.clusters, bk)]

    def run_point_tile(task):
        b, i0, i1 = task
        xn_b, cn_b = norms[b]
        x_tile = _take_x_tile(x.data[b], i0, i1)
        xn_tile = xn_b[i0:i1]
        m = m_out[b, i0:i1]
        a = a_out[b, i0:i1]
        m.fill(np.inf)
        a.fill(-1)
        if dot_mode == "exact":
            ident = threading.get_ident()
            scratch = scratch_map.get(ident)
            if scratch is None:
                scratch = _new_scratch(bn, bk, x.data.dtype)
                scratch_map[ident] = scratch

        def fetch(t):
            k0, k1 = c_tiles[t]
            return _load_c_tile(c.data[b], cn_b, k0, k1)

        # Two-slot cursor: tile t+1 is requested before tile t is consumed,
        # so a real loader overlaps its fetch with the compute below.
        pending = (
            prefetch_executor.submit(fetch, 0) if prefetch_executor else fetch(0)
        )
        for t in range(len(c_tiles)):
            current = pending.result() if prefetch_executor else pending
            if t + 1 < len(c_tiles):
                pending = (
                    prefetch_executor.submit(fetch, t + 1)
                    if prefetch_executor
                    else fetch(t + 1)
                )
            c_tile, cn_tile, k0 = current
            if dot_mode == "exact":
                block = scratch[: i1 - i0, : c_tile.shape[0]]
                _kernels.dist_block(x_tile, c_tile, xn_tile, cn_tile, block)
                _kernels.rowmin_merge(block, k0, m, a)
            else:
                _kernels.assign_tile_fast(x_tile, c_tile, xn_tile, cn_tile, k0, m, a)

    tasks = [
        (b, i0, min(i0 + bn, x.points))
        for b in range(x.batch)
        for i0 in range(0, x.points, bn)
    ]
    if n_workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run_point_tile, tasks))
    else:
        for task in tasks:
            run_point_tile(task)

    return Assignments(a_out), m_out, counters
