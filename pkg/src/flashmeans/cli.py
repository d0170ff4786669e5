"""Command-line front end: gen, cluster, bench, tune, info.

Exit codes: 0 success, 1 usage error, 2 data-format error, 3 internal or
resource error. Every output file (FKM1, FKA1, CSV, JSON) is written via a
temp-then-rename so an interrupted command never leaves a truncated file.
Worker parallelism comes from the FLASHMEANS_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
import traceback
from itertools import product

import numpy as np

from .baseline import (
    argmin_rows,
    baseline_iteration,
    compute_distance_matrix,
    normalize,
    scatter_update,
)
from .core import (
    Counters,
    DataFormatError,
    KMeansConfig,
    ResourceLimitError,
    dtype_for,
    generate_dataset,
    init_centroids,
    set_alloc_limit,
    worker_count,
)
from .fileio import (
    atomic_write_text,
    read_fkm1,
    read_fkm1_header,
    read_fka1_header,
    write_fka1,
    write_fkm1,
)
from .flash_assign import flash_assign
from .pipeline import ChunkStream, chunked_stream_run, lloyd_run
from .sort_inverse import sort_inverse_update
from .tuner import (
    CacheModel,
    ProblemShape,
    enumerate_candidates,
    exhaustive_tune,
    heuristic_config,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_FORMAT = 2
EXIT_INTERNAL = 3

BENCH_COLUMNS = (
    "engine,stage,n,k,d,b,reps,median_latency_ns,"
    "intermediate_bytes_written,intermediate_bytes_read,"
    "synchronized_merges,elements_streamed,b_n,b_k,update_chunk"
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_code_on_error(message))

    def exit_code_on_error(self, message) -> int:
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return EXIT_USAGE


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must be non-empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flashmeans", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a Gaussian-blob FKM1 dataset")
    g.add_argument("out", help="output FKM1 path")
    g.add_argument("--batch", type=int, default=1)
    g.add_argument("--points", type=int, required=True)
    g.add_argument("--k-true", type=int, required=True, help="number of blob centers")
    g.add_argument("--dims", type=int, required=True)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("single", "double"), default="double")
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("info", help="print a dataset or assignment file header")
    i.add_argument("path")
    i.set_defaults(func=cmd_info)

    c = sub.add_parser("cluster", help="run k-means over an FKM1 dataset")
    c.add_argument("data", help="input FKM1 path")
    c.add_argument("--clusters", type=int, required=True)
    c.add_argument("--max-iters", type=int, default=50)
    c.add_argument("--tol", type=float, default=0.0, help="centroid shift tolerance")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--init", choices=("random_distinct", "kmeanspp"), default="random_distinct")
    c.add_argument("--engine", choices=("flash", "baseline"), default="flash")
    c.add_argument("--out-of-core", action="store_true", help="stream the dataset in chunks")
    c.add_argument("--chunk-points", type=int, default=None, help="rows per streamed chunk")
    c.add_argument("--assignments-out", default=None, help="FKA1 path (default: <data>.fka1)")
    c.add_argument("--report-out", default=None, help="JSON report path (default: stdout)")
    c.add_argument("--mem-limit", type=int, default=None, help="cap engine allocations (bytes)")
    c.set_defaults(func=cmd_cluster)

    b = sub.add_parser("bench", help="kernel latency sweep to CSV")
    b.add_argument("--n", type=_int_list, required=True, help="comma-separated point counts")
    b.add_argument("--k", type=_int_list, required=True, help="comma-separated cluster counts")
    b.add_argument("--d", type=_int_list, required=True, help="comma-separated dims")
    b.add_argument("--b", type=_int_list, default=[1], help="comma-separated batch sizes")
    b.add_argument("--engines", default="baseline,flash", help="comma-separated engine names")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--dtype", choices=("single", "double"), default="single")
    b.add_argument("--mem-limit", type=int, default=None)
    b.add_argument("--out", required=True, help="output CSV path")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("tune", help="exhaustive tile search vs the cache heuristic")
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--d", type=int, required=True)
    t.add_argument("--b", type=int, default=1)
    t.add_argument("--l1-bytes", type=int, default=32 * 1024)
    t.add_argument("--l2-bytes", type=int, default=1024 * 1024)
    t.add_argument("--reps", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dtype", choices=("single", "double"), default="single")
    t.add_argument("--out", required=True, help="output CSV path")
    t.set_defaults(func=cmd_tune)

    return p


def cmd_gen(args) -> int:
    x = generate_dataset(
        args.batch, args.points, args.k_true, args.dims, args.spread, args.seed,
        precision=args.dtype,
    )
    write_fkm1(args.out, x)
    print(f"wrote {args.out}: batch={x.batch} points={x.points} dims={x.dims} "
          f"precision={x.precision}")
    return EXIT_OK


def cmd_info(args) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == b"FKA1":
        batch, points = read_fka1_header(args.path)
        info = {"format": "FKA1", "batch": batch, "points": points}
    else:
        h = read_fkm1_header(args.path)
        info = {
            "format": "FKM1",
            "batch": h.batch,
            "points": h.points,
            "dims": h.dims,
            "precision": h.precision,
            "payload_bytes": h.payload_bytes,
        }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_cluster(args) -> int:
    header = read_fkm1_header(args.data)
    if args.clusters > header.points:
        raise ValueError(
            f"clusters ({args.clusters}) exceeds dataset points ({header.points})"
        )
    if args.out_of_core and args.engine != "flash":
        raise ValueError("out-of-core runs use the flash engine")
    if args.chunk_points is not None and not args.out_of_core:
        raise ValueError("--chunk-points requires --out-of-core")
    if args.mem_limit is not None:
        set_alloc_limit(args.mem_limit)

    cfg = KMeansConfig(
        clusters=args.clusters,
        max_iters=args.max_iters,
        shift_tol=args.tol,
        seed=args.seed,
        init=args.init,
        precision=header.precision,
    )
    assign_path = args.assignments_out or args.data + ".fka1"

    t0 = time.perf_counter_ns()
    if args.out_of_core:
        chunk_points = args.chunk_points or header.points
        stream = ChunkStream(args.data, chunk_points)
        with stream:
            result = chunked_stream_run(stream, cfg, assign_path=assign_path)
    else:
        x = read_fkm1(args.data)
        result = lloyd_run(x, cfg, engine=args.engine)
        write_fka1(assign_path, result.assignments)
    wall_ns = time.perf_counter_ns() - t0

    report = {
        "engine": args.engine,
        "out_of_core": args.out_of_core,
        "data": {
            "path": args.data,
            "batch": header.batch,
            "points": header.points,
            "dims": header.dims,
            "precision": header.precision,
        },
        "clusters": args.clusters,
        "seed": args.seed,
        "init": args.init,
        "iterations_run": result.iterations_run,
        "objective_history": result.objective_history.tolist(),
        "wall_time_ns": wall_ns,
        "counters": result.counters.as_dict(),
        "assignments_path": assign_path,
    }
    text = json.dumps(report, indent=2)
    if args.report_out:
        atomic_write_text(args.report_out, text + "\n")
        final = result.objective_history[-1]
        print(f"clustered {args.data}: iterations={result.iterations_run} "
              f"objective={[float(v) for v in final]}")
    else:
        print(text)
    return EXIT_OK


def _median_ns(fn, reps: int) -> int:
    fn()  # warm-up discarded
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def _bench_stage(engine: str, stage: str, x, c, tiling, workers: int):
    """Returns (callable under timing, one-shot counter snapshot)."""
    k = c.clusters
    if engine == "baseline":
        if stage == "assign":
            def run(counters):
                argmin_rows(compute_distance_matrix(x, c, counters, dot_mode="fast"))
        elif stage == "update":
            snap = Counters()
            a = argmin_rows(compute_distance_matrix(x, c, snap, dot_mode="fast"))
            def run(counters):
                scatter_update(x, a, k, counters)
        else:
            def run(counters):
                baseline_iteration(x, c, counters, dot_mode="fast")
    else:
        if stage == "assign":
            def run(counters):
                flash_assign(x, c, tiling, counters, dot_mode="fast", workers=workers)
        elif stage == "update":
            a, _, _ = flash_assign(x, c, tiling, Counters(), dot_mode="fast", workers=workers)
            def run(counters):
                sort_inverse_update(x, a, k, tiling.update_chunk, counters, workers=workers)
        else:
            def run(counters):
                a2, _, _ = flash_assign(x, c, tiling, counters, dot_mode="fast", workers=workers)
                stats, _ = sort_inverse_update(
                    x, a2, k, tiling.update_chunk, counters, workers=workers
                )
                normalize(stats, c)
    snapshot = Counters()
    run(snapshot)
    return run, snapshot


def cmd_bench(args) -> int:
    engines = [e.strip() for e in args.engines.split(",") if e.strip()]
    for e in engines:
        if e not in ("baseline", "flash"):
            raise ValueError(f"unknown engine {e!r}")
    if not engines:
        raise ValueError("at least one engine is required")
    if args.reps < 1:
        raise ValueError("reps must be >= 1")
    if max(args.k) > min(args.n):
        raise ValueError(
            f"every K must be <= every N; got max K {max(args.k)} vs min N {min(args.n)}"
        )
    if args.mem_limit is not None:
        set_alloc_limit(args.mem_limit)
    workers = worker_count()
    elem = dtype_for(args.dtype).itemsize

    lines = [BENCH_COLUMNS]
    for n, k, d, b in product(args.n, args.k, args.d, args.b):
        x = generate_dataset(b, n, k, d, 1.0, args.seed, precision=args.dtype)
        c = init_centroids(x, k, args.seed)
        tiling = heuristic_config(
            ProblemShape(n, k, d, b), CacheModel(elem_bytes=elem, workers=workers)
        )
        for engine, stage in product(engines, ("assign", "update", "e2e")):
            run, snap = _bench_stage(engine, stage, x, c, tiling, workers)
            median = _median_ns(lambda: run(Counters()), args.reps)
            tile_cols = (
                f"{tiling.point_tile},{tiling.centroid_tile},{tiling.update_chunk}"
                if engine == "flash"
                else ",,"
            )
            lines.append(
                f"{engine},{stage},{n},{k},{d},{b},{args.reps},{median},"
                f"{snap.intermediate_bytes_written},{snap.intermediate_bytes_read},"
                f"{snap.synchronized_merges},{snap.elements_streamed},{tile_cols}"
            )
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}: {len(lines) - 1} rows")
    return EXIT_OK


def cmd_tune(args) -> int:
    if args.k > args.n:
        raise ValueError(f"K ({args.k}) must be <= N ({args.n})")
    shape = ProblemShape(points=args.n, clusters=args.k, dims=args.d, batch=args.b)
    workers = worker_count()
    cache = CacheModel(
        l1_bytes=args.l1_bytes,
        l2_bytes=args.l2_bytes,
        elem_bytes=dtype_for(args.dtype).itemsize,
        workers=workers,
    )
    sample = generate_dataset(args.b, args.n, args.k, args.d, 1.0, args.seed,
                              precision=args.dtype)
    candidates = enumerate_candidates(shape)
    report = exhaustive_tune(
        shape, sample, candidates, reps=args.reps, cache=cache, seed=args.seed,
        workers=workers,
    )
    atomic_write_text(args.out, report.csv_text())
    latency_ratio = report.heuristic_latency_ns / max(report.chosen_latency_ns, 1)
    time_ratio = report.tuning_wall_ns / max(report.heuristic_wall_ns, 1)
    h, t = report.heuristic, report.chosen
    print(
        f"heuristic=({h.point_tile},{h.centroid_tile},{h.update_chunk}) "
        f"tuned=({t.point_tile},{t.centroid_tile},{t.update_chunk}) "
        f"candidates={len(report.candidates)} "
        f"latency_ratio={latency_ratio:.3f} time_ratio={time_ratio:.1f}"
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except DataFormatError as e:
        print(f"flashmeans: data format error: {e}", file=sys.stderr)
        return EXIT_DATA_FORMAT
    except (ResourceLimitError, MemoryError) as e:
        print(f"flashmeans: resource error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as e:
        print(f"flashmeans: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"flashmeans: i/o error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    finally:
        set_alloc_limit(None)


if __name__ == "__main__":
    raise SystemExit(main())
