"""Tiling selection: a closed-form cache-model heuristic and an exhaustive timer.

The heuristic budgets half of modeled L1 for the point tile and half of
modeled L2 (split across workers) for the centroid tile, rounds both down
to powers of two, then shrinks tiles if the combined working set including
the transient block would overflow the modeled capacity. It costs
microseconds. The exhaustive tuner times one fused assignment plus one
sort-inverse update per candidate (median of reps, warm-up discarded) and
exists to bound how much the heuristic leaves on the table.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from itertools import product

from .core import Counters, DataMatrix, init_centroids, worker_count
from .flash_assign import TilingConfig, flash_assign
from .sort_inverse import sort_inverse_update

__all__ = [
    "CacheModel",
    "ProblemShape",
    "SearchBounds",
    "TuneReport",
    "pow2_floor",
    "heuristic_config",
    "enumerate_candidates",
    "exhaustive_tune",
]


@dataclass(frozen=True)
class CacheModel:
    """Modeled per-worker cache capacities; supplied by configuration, never probed."""

    l1_bytes: int = 32 * 1024
    l2_bytes: int = 1024 * 1024
    elem_bytes: int = 4
    workers: int = 1

    def __post_init__(self):
        if self.l1_bytes < 1 or self.l2_bytes < 1:
            raise ValueError("cache sizes must be positive")
        if self.elem_bytes not in (4, 8):
            raise ValueError("elem_bytes must be 4 or 8")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class ProblemShape:
    points: int
    clusters: int
    dims: int
    batch: int = 1

    def __post_init__(self):
        if min(self.points, self.clusters, self.dims, self.batch) < 1:
            raise ValueError("shape dimensions must all be >= 1")


def pow2_floor(x) -> int:
    """Largest power of two <= x; 1 for anything below 2."""
    x = int(x)
    if x < 2:
        return 1
    return 1 << (x.bit_length() - 1)


def _clamp(v: int, lo: int, hi: int) -> int:
    return min(max(v, lo), hi)


def heuristic_config(shape: ProblemShape, cache: CacheModel) -> TilingConfig:
    """Closed-form tiling from the cache model; no measurement involved."""
    row_bytes = shape.dims * cache.elem_bytes
    bn = _clamp(pow2_floor((cache.l1_bytes // 2) / row_bytes), 8, shape.points)
    bk = _clamp(
        pow2_floor((cache.l2_bytes // 2) / (cache.workers * row_bytes)),
        8,
        shape.clusters,
    )
    chunk = _clamp(pow2_floor(shape.points / (4 * cache.workers)), 256, shape.points)
    # The closed forms budget the two tiles but not the transient block;
    # shrink (centroid tile first) until the full working set fits the
    # halved budgets, which leave room for norms, indices and prefetch.
    budget = cache.l1_bytes // 2 + cache.l2_bytes // 2

    def working_set(pt, ct):
        return (pt * shape.dims + ct * shape.dims + pt * ct) * cache.elem_bytes

    while working_set(bn, bk) > budget and bk > 8:
        bk = max(8, bk // 2)
    while working_set(bn, bk) > budget and bn > 8:
        bn = max(8, bn // 2)
    return TilingConfig(point_tile=bn, centroid_tile=bk, update_chunk=chunk)


@dataclass(frozen=True)
class SearchBounds:
    """Power-of-two candidate ranges (inclusive), clamped to the problem."""

    point_tile_min: int = 8
    point_tile_cap: int = 1024
    centroid_tile_min: int = 8
    centroid_tile_cap: int = 1024
    update_chunk_min: int = 256
    update_chunk_cap: int = 65536

    def __post_init__(self):
        pairs = [
            (self.point_tile_min, self.point_tile_cap),
            (self.centroid_tile_min, self.centroid_tile_cap),
            (self.update_chunk_min, self.update_chunk_cap),
        ]
        for lo, hi in pairs:
            if lo < 1 or hi < lo:
                raise ValueError("bounds must satisfy 1 <= min <= cap")


def _axis_values(lo: int, cap: int, problem: int) -> list[int]:
    hi = min(cap, problem)
    if hi < lo:
        return [hi]
    vals = []
    v = lo
    while v <= hi:
        vals.append(v)
        v *= 2
    return vals


def enumerate_candidates(
    shape: ProblemShape, bounds: SearchBounds = SearchBounds()
) -> list[TilingConfig]:
    """Cartesian power-of-two grid over tiles and chunk, deduplicated after clamping."""
    bns = _axis_values(bounds.point_tile_min, bounds.point_tile_cap, shape.points)
    bks = _axis_values(bounds.centroid_tile_min, bounds.centroid_tile_cap, shape.clusters)
    chunks = _axis_values(bounds.update_chunk_min, bounds.update_chunk_cap, shape.points)
    seen = set()
    out = []
    for bn, bk, chunk in product(bns, bks, chunks):
        key = (min(bn, shape.points), min(bk, shape.clusters), min(chunk, shape.points))
        if key not in seen:
            seen.add(key)
            out.append(TilingConfig(*key))
    return out


@dataclass
class TuneReport:
    """Every candidate's median latency plus the heuristic comparison."""

    shape: ProblemShape
    candidates: list[TilingConfig]
    latencies_ns: list[int]
    chosen: TilingConfig
    chosen_latency_ns: int
    heuristic: TilingConfig
    heuristic_latency_ns: int
    heuristic_wall_ns: int
    tuning_wall_ns: int
    reps: int = 0
    rows: list = field(default_factory=list, repr=False)

    @property
    def candidates_tried(self) -> int:
        return len(self.candidates)

    def csv_text(self) -> str:
        lines = ["b_n,b_k,update_chunk,median_latency_ns"]
        for cand, lat in zip(self.candidates, self.latencies_ns):
            lines.append(
                f"{cand.point_tile},{cand.centroid_tile},{cand.update_chunk},{lat}"
            )
        return "\n".join(lines) + "\n"


def _time_candidate(
    x: DataMatrix, c, cand: TilingConfig, reps: int, workers: int, dot_mode: str
) -> int:
    """Median wall time (ns) of one assignment + one sort-inverse update."""
    samples = []
    for r in range(reps + 1):
        counters = Counters()
        t0 = time.perf_counter_ns()
        a, _, _ = flash_assign(x, c, cand, counters, dot_mode=dot_mode, workers=workers)
        sort_inverse_update(x, a, c.clusters, cand.update_chunk, counters, workers=workers)
        dt = time.perf_counter_ns() - t0
        if r > 0:  # first rep is warm-up
            samples.append(dt)
    return int(statistics.median(samples))


def exhaustive_tune(
    shape: ProblemShape,
    sample: DataMatrix,
    candidates: list[TilingConfig],
    reps: int = 5,
    cache: CacheModel = CacheModel(),
    seed: int = 0,
    workers: int | None = None,
    dot_mode: str = "fast",
) -> TuneReport:
    """Time every candidate on the sample and report the argmin.

    Also times the closed-form heuristic (its own wall time and the latency
    of the config it picks) so reports can state both trade-off ratios.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3 for a stable median")
    if not candidates:
        raise ValueError("no candidates to tune over")
    if sample.points != shape.points or sample.dims != shape.dims:
        raise ValueError("sample does not match the declared shape")
    n_workers = worker_count(workers)
    c = init_centroids(sample, shape.clusters, seed)

    t0 = time.perf_counter_ns()
    heuristic = heuristic_config(shape, cache)
    heuristic_wall_ns = time.perf_counter_ns() - t0

    t0 = time.perf_counter_ns()
    latencies = [
        _time_candidate(sample, c, cand, reps, n_workers, dot_mode) for cand in candidates
    ]
    tuning_wall_ns = time.perf_counter_ns() - t0

    best = min(range(len(candidates)), key=lambda i: latencies[i])
    heuristic_latency_ns = _time_candidate(
        sample, c, heuristic.clamped(shape.points, shape.clusters), reps, n_workers, dot_mode
    )
    return TuneReport(
        shape=shape,
        candidates=list(candidates),
        latencies_ns=latencies,
        chosen=candidates[best],
        chosen_latency_ns=latencies[best],
        heuristic=heuristic,
        heuristic_latency_ns=heuristic_latency_ns,
        heuristic_wall_ns=heuristic_wall_ns,
        tuning_wall_ns=tuning_wall_ns,
        reps=reps,
    )
