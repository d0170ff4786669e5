"""Acceptance harness: one test and one printed verdict line per criterion.

Each criterion prints "criterion N (...): PASS/WARN - detail" through the
capture bypass so the verdicts are visible in any pytest run. Criterion 7
is environment-sensitive by contract: on constrained hosts (fewer than 4
workers) it reports measured ratios as a warning instead of failing.
"""

import importlib
import os
import time
from statistics import median

import numpy as np
import pytest

from flashmeans import (
    CacheModel,
    Centroids,
    ChunkStream,
    Counters,
    DataMatrix,
    KMeansConfig,
    ProblemShape,
    TilingConfig,
    argmin_rows,
    baseline_iteration,
    compute_distance_matrix,
    enumerate_candidates,
    exhaustive_tune,
    flash_assign,
    generate_dataset,
    init_centroids,
    kmeans_objective,
    lloyd_run,
    out_of_core_iteration,
    read_fka1,
    scatter_update,
    sort_inverse_update,
    worker_count,
    write_fkm1,
)
from flashmeans.cli import main as cli_main
from flashmeans.pipeline import chunked_stream_run
from flashmeans.tuner import heuristic_config

pl = importlib.import_module("flashmeans.pipeline")


@pytest.fixture()
def announce(capsys):
    def _go(num, title, status, detail=""):
        with capsys.disabled():
            tail = f" - {detail}" if detail else ""
            print(f"criterion {num} ({title}): {status}{tail}")

    return _go


def random_instances(rng, count, with_corners=True):
    """Shapes spanning B in {1,2}, N in [1,4096], K in [1,64], d in [1,32]."""
    shapes = []
    if with_corners:
        shapes += [
            (1, 1, 1, 1), (1, 1, 64, 1), (1, 4096, 1, 1), (1, 4096, 64, 32),
            (2, 1, 1, 32), (2, 4096, 64, 1), (2, 17, 64, 32), (1, 4096, 1, 32),
        ]
    while len(shapes) < count:
        b = int(rng.integers(1, 3))
        n = int(2 ** rng.uniform(0, 12))
        k = int(2 ** rng.uniform(0, 6))
        d = int(2 ** rng.uniform(0, 5))
        shapes.append((b, n, k, d))
    return shapes


def random_pair(rng, b, n, k, d, precision):
    dt = np.float32 if precision == "single" else np.float64
    x = DataMatrix(np.ascontiguousarray(rng.normal(scale=3.0, size=(b, n, d)).astype(dt)))
    c = Centroids(np.ascontiguousarray(rng.normal(scale=3.0, size=(b, k, d)).astype(dt)))
    return x, c


def test_criterion_1_assignment_oracle_equivalence(announce):
    rng = np.random.default_rng(20260814)
    shapes = random_instances(rng, 208)
    t0 = time.perf_counter()
    checked = 0
    for i, (b, n, k, d) in enumerate(shapes):
        precision = "single" if i % 2 == 0 else "double"
        x, c = random_pair(rng, b, n, k, d, precision)
        bn = int(rng.integers(1, n + 1))
        bk = int(rng.integers(1, k + 1))
        tiling = TilingConfig(bn, bk, max(1, n // 2))
        a_flash, _, _ = flash_assign(x, c, tiling, Counters())
        a_base = argmin_rows(compute_distance_matrix(x, c, Counters()))
        assert np.array_equal(a_flash.values, a_base.values), (
            f"assignment mismatch at B={b} N={n} K={k} d={d} "
            f"tiles=({bn},{bk}) {precision}"
        )
        checked += 1
    elapsed = time.perf_counter() - t0
    assert checked >= 200
    assert elapsed < 60.0
    announce(1, "assignment oracle equivalence", "PASS",
             f"{checked} instances bitwise equal in {elapsed:.1f}s")


def test_criterion_2_and_3_update_oracle_and_merge_bound(announce):
    rng = np.random.default_rng(108)
    shapes = random_instances(rng, 208)
    t0 = time.perf_counter()
    checked = 0
    for i, (b, n, k, d) in enumerate(shapes):
        precision = "single" if i % 2 == 0 else "double"
        x, _ = random_pair(rng, b, n, k, d, precision)
        ids = np.minimum(rng.zipf(1.6, size=(b, n)) - 1, k - 1).astype(np.int32)
        chunk = int(rng.integers(1, n + 1))
        for elem in range(b):
            x_e = DataMatrix(np.ascontiguousarray(x.data[elem : elem + 1]))
            from flashmeans import Assignments

            a_e = Assignments(np.ascontiguousarray(ids[elem : elem + 1]))
            base = Counters()
            ref = scatter_update(x_e, a_e, k, base)
            flash = Counters()
            stats, _ = sort_inverse_update(x_e, a_e, k, chunk, flash)
            np.testing.assert_allclose(stats.sums, ref.sums, rtol=1e-10, atol=1e-12)
            assert np.array_equal(stats.counts, ref.counts)
            # criterion 3: merge accounting per batch element
            assert base.synchronized_merges == n
            occupied = len(np.unique(ids[elem]))
            eff = max(1, min(chunk, n))
            assert flash.synchronized_merges <= occupied + -(-n // eff) - 1
        checked += 1
    elapsed = time.perf_counter() - t0
    assert checked >= 200
    assert elapsed < 60.0
    announce(2, "update oracle equivalence", "PASS",
             f"{checked} zipf instances within 1e-10 rel in {elapsed:.1f}s")
    announce(3, "merge-count bound", "PASS",
             "segment merges <= K' + ceil(N/chunk) - 1; baseline = N exactly")


def test_criterion_4_zero_materialization_counters(announce):
    rng = np.random.default_rng(44)
    for b, n, k, d in random_instances(rng, 12, with_corners=False):
        x, c = random_pair(rng, b, n, k, d, "single")
        counters = Counters()
        counters.intermediate_bytes_written = 111
        counters.intermediate_bytes_read = 222
        counters.synchronized_merges = 333
        counters.elements_streamed = 444
        flash_assign(x, c, TilingConfig(32, 8, 64), counters)
        assert counters.as_dict() == {
            "intermediate_bytes_written": 111,
            "intermediate_bytes_read": 222,
            "synchronized_merges": 333,
            "elements_streamed": 444,
        }
    x = generate_dataset(1, 1024, 8, 8, 0.5, seed=4, precision="single")
    c = init_centroids(x, 64, seed=4)
    counters = Counters()
    baseline_iteration(x, c, counters)
    wrote, read = counters.intermediate_bytes_written, counters.intermediate_bytes_read
    assert wrote == read == 1024 * 64 * 4
    assert wrote + read == 524288
    announce(4, "zero-materialization counters", "PASS",
             f"flash traffic 0; baseline iteration wrote+read {wrote + read} bytes")


def test_criterion_5_lloyd_correctness(announce):
    blobs = DataMatrix(np.array([[[0.0], [0.1], [10.0], [10.1]]]))
    r = lloyd_run(blobs, KMeansConfig(clusters=2, seed=1, max_iters=50))
    got = sorted(float(v) for v in r.centroids.data[0, :, 0])
    np.testing.assert_allclose(got, [0.05, 10.05], atol=1e-12)
    obj = float(kmeans_objective(blobs, r.centroids, r.assignments)[0])
    assert abs(obj - 0.01) <= 1e-9

    rng = np.random.default_rng(55)
    for trial in range(20):
        n = int(rng.integers(100, 800))
        k = int(rng.integers(2, 12))
        d = int(rng.integers(1, 8))
        x = generate_dataset(1, n, max(2, k // 2), d, 2.5, seed=trial, precision="double")
        run = lloyd_run(x, KMeansConfig(clusters=k, seed=trial, max_iters=50))
        h = run.objective_history[:, 0]
        assert np.all(h[1:] <= h[:-1] * (1.0 + 1e-9) + 1e-12), f"trial {trial}"
    announce(5, "Lloyd correctness", "PASS",
             f"two-blob objective {obj:.12f}; 20 histories non-increasing over 50 iters")


def test_criterion_6_out_of_core_equivalence(announce, tmp_path, monkeypatch):
    n, dims, k, chunk_points = 10_000, 8, 8, 1536  # 7 chunks, last one ragged
    x = generate_dataset(1, n, k, dims, 0.8, seed=6, precision="single")
    path = str(tmp_path / "big.fkm1")
    write_fkm1(path, x)
    cfg = KMeansConfig(clusters=k, seed=60, max_iters=25)

    ref = lloyd_run(x, cfg)
    allocs = []
    ingest_targets = set()
    real_alloc, real_ingest = pl._alloc_chunk_buffers, pl._ingest_chunk
    monkeypatch.setattr(
        pl,
        "_alloc_chunk_buffers",
        lambda cp, d, dt: (allocs.append(cp), real_alloc(cp, d, dt))[1],
    )
    monkeypatch.setattr(
        pl,
        "_ingest_chunk",
        lambda s, b, t, buf: (ingest_targets.add(id(buf)), real_ingest(s, b, t, buf))[1],
    )
    with ChunkStream(path, chunk_points) as stream:
        assert stream.n_chunks == 7
        ooc = chunked_stream_run(stream, cfg, assign_path=path + ".fka1")
    assert np.array_equal(ooc.centroids.data, ref.centroids.data), "centroids differ"
    assert np.array_equal(ooc.assignments.values, ref.assignments.values)
    # resident point buffers: one two-slot allocation, ingest confined to it
    assert allocs == [chunk_points]
    assert len(ingest_targets) == 2

    # overlap: per-chunk ingest delay T and compute >= T; the pipelined wall
    # must beat 1.2 * (max(total ingest, total compute) + one chunk's cost)
    t_ingest, t_compute = 0.05, 0.07
    real_assign = pl.flash_assign

    def slow_ingest(s, b, t, buf):
        time.sleep(t_ingest)
        return real_ingest(s, b, t, buf)

    def slow_assign(*a, **kw):
        time.sleep(t_compute)
        return real_assign(*a, **kw)

    monkeypatch.setattr(pl, "_ingest_chunk", slow_ingest)
    monkeypatch.setattr(pl, "flash_assign", slow_assign)
    with ChunkStream(path, chunk_points) as stream:
        c0 = init_centroids(x, k, seed=60)
        t0 = time.perf_counter()
        _, store, _ = out_of_core_iteration(stream, c0, cfg, Counters())
        wall = time.perf_counter() - t0
        store.abort()
    total_ingest, total_compute = 7 * t_ingest, 7 * t_compute
    bound = 1.2 * (max(total_ingest, total_compute) + max(t_ingest, t_compute))
    sequential = total_ingest + total_compute
    assert wall <= bound, f"wall {wall:.3f}s exceeds overlap bound {bound:.3f}s"
    announce(6, "out-of-core equivalence", "PASS",
             f"7 uneven chunks bitwise equal; 2 resident buffers; "
             f"wall {wall:.3f}s <= bound {bound:.3f}s (sequential {sequential:.3f}s)")


def _median_seconds(fn, reps=3):
    fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return median(samples)


def test_criterion_7_kernel_speedup(announce):
    workers = worker_count()
    n, k, d = 262_144, 1024, 64
    x = generate_dataset(1, n, 64, d, 1.0, seed=7, precision="single")
    c = init_centroids(x, k, seed=7)
    tiling = heuristic_config(
        ProblemShape(points=n, clusters=k, dims=d), CacheModel(elem_bytes=4, workers=workers)
    )

    t_base_assign = _median_seconds(
        lambda: argmin_rows(compute_distance_matrix(x, c, Counters(), dot_mode="fast"))
    )
    t_flash_assign = _median_seconds(
        lambda: flash_assign(x, c, tiling, Counters(), dot_mode="fast", workers=workers)
    )
    a, _, _ = flash_assign(x, c, tiling, Counters(), dot_mode="fast", workers=workers)
    t_base_update = _median_seconds(lambda: scatter_update(x, a, k, Counters()))
    t_flash_update = _median_seconds(
        lambda: sort_inverse_update(x, a, k, tiling.update_chunk, Counters(), workers=workers)
    )

    assign_ratio = t_base_assign / t_flash_assign
    update_ratio = t_base_update / t_flash_update
    detail = (
        f"workers={workers}; assign {assign_ratio:.2f}x (need >= 1.5), "
        f"update {update_ratio:.2f}x (need >= 1.2)"
    )
    if assign_ratio >= 1.5 and update_ratio >= 1.2:
        announce(7, "kernel speedup", "PASS", detail)
    elif workers < 4:
        announce(7, "kernel speedup", "WARN",
                 f"environment-constrained host ({workers} worker(s) < 4); {detail}")
    else:
        announce(7, "kernel speedup", "FAIL", detail)
        pytest.fail(detail)


def paired_latency_ratio(x, c, h_cfg, b_cfg, workers, reps=11):
    """Median latency ratio of two tilings with interleaved reps.

    Alternating the two configs inside one loop exposes both to the same
    scheduler and frequency conditions; timing them in separate phases lets
    a throttle window skew one side wholesale.
    """

    def once(cand):
        counters = Counters()
        t0 = time.perf_counter_ns()
        a, _, _ = flash_assign(x, c, cand, counters, dot_mode="fast", workers=workers)
        sort_inverse_update(x, a, c.clusters, cand.update_chunk, counters, workers=workers)
        return time.perf_counter_ns() - t0

    once(h_cfg)
    once(b_cfg)
    hs, bs = [], []
    for _ in range(reps):
        hs.append(once(h_cfg))
        bs.append(once(b_cfg))
    return median(hs) / median(bs)


def test_criterion_8_tuning_trade_off(announce):
    shapes = [
        (1024, 64, 8), (2048, 64, 4), (1024, 128, 8),
        (2048, 128, 2), (4096, 64, 2), (1024, 64, 16),
    ]
    workers = worker_count()
    worst_latency, worst_wall = 0.0, np.inf
    for n, k, d in shapes:
        shape = ProblemShape(points=n, clusters=k, dims=d)
        cands = enumerate_candidates(shape)
        assert len(cands) >= 16, f"only {len(cands)} candidates at {(n, k, d)}"
        x = generate_dataset(1, n, 4, d, 1.0, seed=8, precision="single")
        report = exhaustive_tune(shape, x, cands, reps=5)
        # re-time heuristic vs tuned best head-to-head: the sweep's medians
        # select the winner, but a min over many noisy medians would
        # underestimate its true latency
        c = init_centroids(x, k, seed=8)
        latency_ratio = paired_latency_ratio(
            x, c, report.heuristic.clamped(n, k), report.chosen, workers
        )
        wall_ratio = report.tuning_wall_ns / max(report.heuristic_wall_ns, 1)
        worst_latency = max(worst_latency, latency_ratio)
        worst_wall = min(worst_wall, wall_ratio)
        assert latency_ratio <= 1.25, (
            f"heuristic {latency_ratio:.3f}x tuned best at {(n, k, d)}"
        )
        assert wall_ratio >= 10.0
    announce(8, "tuning trade-off", "PASS",
             f"6 shapes; worst heuristic latency {worst_latency:.3f}x tuned "
             f"(<= 1.25); tuning wall >= {worst_wall:.0f}x heuristic wall (>= 10)")


def test_criterion_9_cli_round_trips(announce, tmp_path, capsys):
    import json

    data = str(tmp_path / "golden.fkm1")
    args = ["gen", data, "--points", "96", "--k-true", "3", "--dims", "4",
            "--dtype", "double", "--seed", "12"]
    assert cli_main(args) == 0
    capsys.readouterr()
    # regeneration is the golden reference: identical bytes
    twin = str(tmp_path / "twin.fkm1")
    assert cli_main(["gen", twin] + args[2:]) == 0
    capsys.readouterr()
    assert open(data, "rb").read() == open(twin, "rb").read()

    assert cli_main(["info", data]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info == {
        "format": "FKM1", "batch": 1, "points": 96, "dims": 4,
        "precision": "double", "payload_bytes": 96 * 4 * 8,
    }

    fka = {}
    for engine in ("flash", "baseline"):
        out = str(tmp_path / f"{engine}.fka1")
        code = cli_main([
            "cluster", data, "--clusters", "3", "--seed", "12",
            "--engine", engine, "--assignments-out", out,
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["assignments_path"] == out
        a = read_fka1(out)
        assert a.values.shape == (1, 96) and int(a.values.max()) < 3
        fka[engine] = open(out, "rb").read()
    assert fka["flash"] == fka["baseline"], "engines disagree on FKA1 bytes"

    assert cli_main(["info", str(tmp_path / "flash.fka1")]) == 0
    assert json.loads(capsys.readouterr().out) == {
        "format": "FKA1", "batch": 1, "points": 96,
    }
    announce(9, "CLI round-trips", "PASS",
             "gen/info/cluster golden files agree; engines emit identical FKA1 bytes")
