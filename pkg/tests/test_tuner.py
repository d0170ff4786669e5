"""Cache-model heuristic and the exhaustive tile search."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashmeans import (
    CacheModel,
    ProblemShape,
    TilingConfig,
    enumerate_candidates,
    exhaustive_tune,
    generate_dataset,
)
from flashmeans.tuner import SearchBounds, heuristic_config, pow2_floor


class TestPow2Floor:
    @pytest.mark.parametrize(
        "x,want",
        [(0, 1), (1, 1), (2, 2), (3, 2), (4, 4), (7, 4), (8, 8), (1023, 512), (1024, 1024), (2.9, 2)],
    )
    def test_values(self, x, want):
        assert pow2_floor(x) == want


class TestCacheModel:
    def test_defaults(self):
        m = CacheModel()
        assert m.l1_bytes == 32 * 1024 and m.l2_bytes == 1024 * 1024
        assert m.elem_bytes == 4 and m.workers == 1

    @pytest.mark.parametrize(
        "kw", [dict(l1_bytes=0), dict(l2_bytes=-1), dict(elem_bytes=2), dict(workers=0)]
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            CacheModel(**kw)


class TestHeuristicConfig:
    def test_worked_example(self):
        # d=128, single, L1=64 KiB: half of L1 holds 64 rows of 512 bytes.
        # The full working set then forces the centroid tile down to 512.
        shape = ProblemShape(points=1 << 20, clusters=4096, dims=128)
        cache = CacheModel(l1_bytes=64 * 1024, l2_bytes=1024 * 1024, elem_bytes=4)
        t = heuristic_config(shape, cache)
        assert t.point_tile == 64
        assert t.centroid_tile == 512
        assert t.working_set_bytes(128, 4) <= 64 * 1024 // 2 + 1024 * 1024 // 2

    def test_small_problem_clamps_to_shape(self):
        t = heuristic_config(ProblemShape(points=30, clusters=8, dims=4), CacheModel())
        assert t.point_tile <= 30 and t.centroid_tile <= 8
        assert t.update_chunk <= 30

    def test_worker_count_shrinks_centroid_tile(self):
        shape = ProblemShape(points=1 << 18, clusters=4096, dims=16)
        one = heuristic_config(shape, CacheModel(workers=1))
        eight = heuristic_config(shape, CacheModel(workers=8))
        assert eight.centroid_tile <= one.centroid_tile
        assert eight.update_chunk <= one.update_chunk

    def test_deterministic(self):
        shape = ProblemShape(points=100_000, clusters=512, dims=64, batch=2)
        cache = CacheModel(elem_bytes=8, workers=4)
        assert heuristic_config(shape, cache) == heuristic_config(shape, cache)

    @settings(max_examples=80, deadline=None)
    @given(
        n=st.integers(1, 1 << 22),
        k=st.integers(1, 1 << 14),
        d=st.integers(1, 512),
        l1=st.integers(1024, 1 << 20),
        l2=st.integers(1 << 15, 1 << 24),
        elem=st.sampled_from([4, 8]),
        workers=st.integers(1, 16),
    )
    def test_invariants_property(self, n, k, d, l1, l2, elem, workers):
        shape = ProblemShape(points=n, clusters=k, dims=d)
        cache = CacheModel(l1_bytes=l1, l2_bytes=l2, elem_bytes=elem, workers=workers)
        t = heuristic_config(shape, cache)
        eff = t.clamped(n, k)
        assert 1 <= eff.point_tile <= n
        assert 1 <= eff.centroid_tile <= k
        assert 1 <= eff.update_chunk <= n
        # the modeled working set must fit the halved cache budgets unless
        # already at the floor tiles
        if t.point_tile > 8 or t.centroid_tile > 8:
            assert t.working_set_bytes(d, elem) <= l1 // 2 + l2 // 2 or (
                t.point_tile == 8 and t.centroid_tile == 8
            )


class TestEnumerateCandidates:
    def test_tiny_problem_single_candidate(self):
        cands = enumerate_candidates(ProblemShape(points=8, clusters=8, dims=4))
        assert cands == [TilingConfig(8, 8, 8)]

    def test_grid_size_64(self):
        cands = enumerate_candidates(ProblemShape(points=64, clusters=64, dims=4))
        pairs = {(c.point_tile, c.centroid_tile) for c in cands}
        assert pairs == {(a, b) for a in (8, 16, 32, 64) for b in (8, 16, 32, 64)}
        assert len(cands) == 16  # update_chunk clamps to one value (64)
        assert all(c.update_chunk == 64 for c in cands)

    def test_axis_values_honor_caps(self):
        cands = enumerate_candidates(
            ProblemShape(points=1 << 20, clusters=2048, dims=8),
            SearchBounds(point_tile_cap=64, centroid_tile_cap=32, update_chunk_cap=1024),
        )
        assert max(c.point_tile for c in cands) == 64
        assert max(c.centroid_tile for c in cands) == 32
        assert max(c.update_chunk for c in cands) == 1024

    def test_deduplicates_after_clamping(self):
        cands = enumerate_candidates(ProblemShape(points=300, clusters=10, dims=4))
        keys = [(c.point_tile, c.centroid_tile, c.update_chunk) for c in cands]
        assert len(keys) == len(set(keys))
        assert all(c.centroid_tile <= 10 and c.point_tile <= 300 for c in cands)

    def test_bounds_validation(self):
        with pytest.raises(ValueError):
            SearchBounds(point_tile_min=0)
        with pytest.raises(ValueError):
            SearchBounds(point_tile_min=64, point_tile_cap=8)


class TestExhaustiveTune:
    def tune(self, n=256, k=16, d=4, reps=3, **kw):
        shape = ProblemShape(points=n, clusters=k, dims=d)
        x = generate_dataset(1, n, 4, d, 0.5, seed=7, precision="single")
        cands = enumerate_candidates(shape)
        return exhaustive_tune(shape, x, cands, reps=reps, **kw), cands

    def test_chosen_is_argmin(self):
        report, cands = self.tune()
        assert report.candidates_tried == len(cands)
        i = report.latencies_ns.index(min(report.latencies_ns))
        assert report.chosen == cands[i]
        assert report.chosen_latency_ns == report.latencies_ns[i]
        assert report.chosen_latency_ns <= min(report.latencies_ns)

    def test_report_carries_heuristic_and_walls(self):
        report, _ = self.tune()
        assert isinstance(report.heuristic, TilingConfig)
        assert report.heuristic_latency_ns > 0
        assert report.heuristic_wall_ns >= 0
        assert report.tuning_wall_ns > 0
        # measuring every candidate costs far more than the closed form
        assert report.tuning_wall_ns > report.heuristic_wall_ns

    def test_single_candidate_problem(self):
        report, cands = self.tune(n=8, k=8)
        assert len(cands) == 1
        assert report.chosen == TilingConfig(8, 8, 8)
        assert report.heuristic.clamped(8, 8) == TilingConfig(8, 8, 8)

    def test_csv_text(self):
        report, cands = self.tune()
        lines = report.csv_text().strip().split("\n")
        assert lines[0] == "b_n,b_k,update_chunk,median_latency_ns"
        assert len(lines) == 1 + len(cands)
        first = lines[1].split(",")
        assert [int(v) for v in first[:3]] == [
            cands[0].point_tile,
            cands[0].centroid_tile,
            cands[0].update_chunk,
        ]
        assert int(first[3]) == report.latencies_ns[0]

    def test_validation(self):
        shape = ProblemShape(points=32, clusters=4, dims=3)
        x = generate_dataset(1, 32, 2, 3, 0.5, seed=1, precision="single")
        cands = enumerate_candidates(shape)
        with pytest.raises(ValueError, match="reps"):
            exhaustive_tune(shape, x, cands, reps=2)
        with pytest.raises(ValueError, match="candidates"):
            exhaustive_tune(shape, x, [], reps=3)
        wrong = generate_dataset(1, 16, 2, 3, 0.5, seed=1, precision="single")
        with pytest.raises(ValueError, match="sample"):
            exhaustive_tune(shape, wrong, cands, reps=3)
