"""Command-line entry point: worker bootstrap, benchmarks and demos.

Exit codes: 0 success, 1 failed check, 2 worker could not reach its master,
3 worker protocol error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import logging
import sys
import time
from typing import List, Optional, Sequence

EXIT_FAILED = 1
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taskforge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    w = sub.add_parser("worker", help="run a pool worker (reads TASKFORGE_* env vars)")
    w.add_argument("--import", dest="imports", action="append", default=[], metavar="MODULE",
                   help="module registering extra task functions; repeatable, order matters")

    o = sub.add_parser("bench-overhead", help="framework overhead on fixed-duration tasks")
    o.add_argument("--duration", default="all", choices=["all", "1s", "100ms", "10ms", "1ms"])
    o.add_argument("--workers", type=_positive_int, default=5)
    o.add_argument("--reps", type=_positive_int, default=5)
    o.add_argument("--out", metavar="PATH", help="CSV output path")
    o.add_argument("--backend", default="local", choices=["local", "sim"])

    e = sub.add_parser("bench-es", help="evolution strategies on the sphere function")
    e.add_argument("--dim", type=_positive_int, default=10)
    e.add_argument("--pop", type=_positive_int, default=64)
    e.add_argument("--sigma", type=_positive_float, default=0.1)
    e.add_argument("--alpha", type=_positive_float, default=0.1)
    e.add_argument("--iters", type=_nonneg_int, default=100)
    e.add_argument("--workers", type=_positive_int, default=4)
    e.add_argument("--seed", type=_nonneg_int, default=42)
    e.add_argument("--out", metavar="PATH", help="trajectory CSV output path")
    e.add_argument("--eval-ms", type=float, default=0.0, help="CPU busy-work per evaluation")
    e.add_argument("--backend", default="local", choices=["local", "sim"])

    f = sub.add_parser("bench-fault", help="map under scripted worker kills")
    f.add_argument("--tasks", type=_positive_int, default=200)
    f.add_argument("--kill-workers", type=_nonneg_int, default=2)
    f.add_argument("--kill-after", type=_nonneg_int, default=10)
    f.add_argument("--workers", type=_positive_int, default=4)
    f.add_argument("--max-attempts", type=_positive_int, default=3)
    f.add_argument("--poison-task", type=_nonneg_int, default=None, metavar="INDEX",
                   help="this input crashes every worker that runs it")
    f.add_argument("--backend", default="sim", choices=["local", "sim"])

    d = sub.add_parser("demo-pi", help="Monte-Carlo estimate of pi")
    d.add_argument("--samples", type=_positive_int, default=1_000_000)
    d.add_argument("--workers", type=_positive_int, default=4)
    d.add_argument("--seed", type=_nonneg_int, default=0)
    d.add_argument("--backend", default="local", choices=["local", "sim"])
    return p


def cmd_worker(args) -> int:
    from .worker import run_worker_from_env

    for mod in args.imports:
        importlib.import_module(mod)
    return run_worker_from_env()


def cmd_bench_overhead(args) -> int:
    from .pool import Pool, PoolConfig
    from .workloads import DURATIONS, OverheadConfig, run_overhead

    names = list(DURATIONS) if args.duration == "all" else [args.duration]
    rows = []
    with Pool(PoolConfig(workers=args.workers, backend=args.backend)) as pool:
        pool.wait_ready()
        print(f"{'duration':>9} {'tasks':>6} {'ideal_s':>8} {'median_s':>9} {'mean_s':>8} {'ratio':>6}")
        for name in names:
            cfg = OverheadConfig(DURATIONS[name], workers=args.workers, repetitions=args.reps)
            rep = run_overhead(cfg, pool)
            rows.append((name, args.workers, rep))
            print(f"{name:>9} {rep.batch_size:>6} {rep.ideal:>8.3f} {rep.median:>9.4f} "
                  f"{rep.mean:>8.4f} {rep.ratio:>6.3f}", flush=True)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["duration", "task_duration_s", "workers", "batch_size", "ideal_s",
                          "median_s", "mean_s", "ratio", "warmup_s", "runs_s"])
            for name, workers, r in rows:
                out.writerow([name, r.task_duration, workers, r.batch_size, r.ideal,
                              f"{r.median:.6f}", f"{r.mean:.6f}", f"{r.ratio:.6f}",
                              f"{r.warmup:.6f}", ";".join(f"{x:.6f}" for x in r.measured)])
    return 0


def write_trajectory(path: str, trajectory) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "reward", "theta_norm"])
        for rec in trajectory:
            out.writerow([rec.iteration, repr(rec.best_reward), repr(rec.theta_norm)])


def cmd_bench_es(args) -> int:
    from .pool import Pool, PoolConfig
    from .workloads import EsConfig, run_es

    cfg = EsConfig(dim=args.dim, population=args.pop, sigma=args.sigma, alpha=args.alpha,
                   iterations=args.iters, seed=args.seed, eval_cost=args.eval_ms / 1000.0)
    try:
        cfg.validate()
    except ValueError as exc:
        print(f"taskforge bench-es: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    with Pool(PoolConfig(workers=args.workers, backend=args.backend)) as pool:
        pool.wait_ready()
        run = run_es(cfg, pool)
    last = run.trajectory[-1]
    print(f"workers={args.workers} iterations={cfg.iterations} wall_s={run.wall_time:.3f} "
          f"final_reward={-last.theta_norm ** 2:.6g} theta_norm={last.theta_norm:.6g}")
    if args.out:
        write_trajectory(args.out, run.trajectory)
    return 0


def cmd_bench_fault(args) -> int:
    from .backend import SimScript
    from .codec import unpack_int
    from .pool import Pool, PoolConfig, TaskPoisoned
    from .tasks import square_payload

    script = SimScript.kills(range(args.kill_workers), args.kill_after)
    cfg = PoolConfig(workers=args.workers, backend=args.backend, script=script,
                     max_attempts=args.max_attempts, check_invariants=True)
    poison = args.poison_task if args.poison_task is not None and args.poison_task < args.tasks else None
    t0 = time.perf_counter()
    with Pool(cfg) as pool:
        futures = [pool.apply_async("square", square_payload(i, 0.002, crash=(i == poison)))
                   for i in range(args.tasks)]
        results, poisoned = {}, []
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result(timeout=120)
            except TaskPoisoned:
                poisoned.append(i)
        violations = list(pool.invariant_violations)
        stats = pool.shutdown()
    elapsed = time.perf_counter() - t0
    expected = {i: i * i for i in range(args.tasks) if i != poison}
    got = {i: unpack_int(r.payload) for i, r in results.items() if r.ok}
    ids = [r.id for r in results.values()]
    kills = stats.workers_failed - (args.max_attempts if poison is not None else 0)
    checks = {
        "results_match_oracle": got == expected,
        "task_ids_unique": len(ids) == len(set(ids)),
        "kills_fired": kills == args.kill_workers,
        "resubmissions_cover_kills": stats.resubmissions >= kills,
        "poison_path": poisoned == ([poison] if poison is not None else []),
        "conservation": not violations,
    }
    for line in stats.format().splitlines():
        print(f"  {line}")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if poison is not None and poisoned:
        print(f"task {poison} poisoned after {args.max_attempts} worker deaths (expected)")
    print(f"elapsed_s={elapsed:.3f}")
    return 0 if all(checks.values()) else EXIT_FAILED


def cmd_demo_pi(args) -> int:
    from .pool import Pool, PoolConfig
    from .workloads import estimate_pi

    with Pool(PoolConfig(workers=args.workers, backend=args.backend)) as pool:
        est = estimate_pi(pool, args.samples, args.seed)
    print(f"Pi is roughly {est!r}")
    return 0


COMMANDS = {
    "worker": cmd_worker,
    "bench-overhead": cmd_bench_overhead,
    "bench-es": cmd_bench_es,
    "bench-fault": cmd_bench_fault,
    "demo-pi": cmd_demo_pi,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
