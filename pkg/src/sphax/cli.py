"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from . import backend
from .harness import ConfigError, RunConfig, emit_reports, run_simulation
from .sph import SphaxError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sphax",
        description="Task-based SPH engine with simulated ranks and "
                    "asynchronous per-cell messaging")
    p.add_argument("--n", type=int, default=4096, help="particle count")
    p.add_argument("--box", type=float, default=1.0, help="periodic box edge")
    p.add_argument("--ic", choices=("uniform", "clustered"), default="uniform")
    p.add_argument("--clumps", type=int, default=8,
                   help="clump count for clustered ICs")
    p.add_argument("--clump-radius", type=float, default=0.05)
    p.add_argument("--clump-fraction", type=float, default=0.75)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--ranks", type=int, default=1, help="simulated ranks")
    p.add_argument("--workers", type=int, default=1, help="workers per rank")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=None,
                   help="fixed timestep (default: CFL estimate at t=0)")
    p.add_argument("--repart-period", type=int, default=100)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--trace", action="store_true",
                   help="dump the per-task trace CSV")
    p.add_argument("--split-threshold", type=int, default=100)
    p.add_argument("--min-cell-occupancy", type=float, default=0.0,
                   help="coarsen the top grid when cells would hold fewer "
                        "particles than this (0 keeps the strict h_max sizing)")
    p.add_argument("--transport", choices=("instant", "delay"), default="instant")
    p.add_argument("--latency", type=float, default=0.0,
                   help="injected message latency in seconds (delay transport)")
    p.add_argument("--barriered", action="store_true",
                   help="bulk-synchronous reference mode (flush between phases)")
    p.add_argument("--snapshot-text", action="store_true",
                   help="text snapshot records instead of binary")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig(
            n=args.n, box=args.box, ic=args.ic, clumps=args.clumps,
            clump_radius=args.clump_radius, clump_fraction=args.clump_fraction,
            steps=args.steps, repart_period=args.repart_period,
            ranks=args.ranks, workers=args.workers, seed=args.seed, dt=args.dt,
            split_threshold=args.split_threshold,
            min_cell_occupancy=args.min_cell_occupancy,
            transport=args.transport, latency=args.latency,
            barriered=args.barriered, out_dir=args.out_dir, trace=args.trace,
            snapshot_mode="text" if args.snapshot_text else "binary")
    except ConfigError as exc:
        print(f"sphax: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run_simulation(config)
    except SphaxError as exc:
        print(f"sphax: runtime error: {exc}", file=sys.stderr)
        return 2
    rep = result.report
    print(f"kernels: {backend.active().NAME}")
    print(f"steps: {config.steps}  ranks: {config.ranks}  "
          f"workers/rank: {config.workers}  dt: {result.engine.dt:.6g}")
    print(f"mean step wall (excl. first/last): {rep.mean_ms:.3f} ms")
    print(f"imbalance: {rep.imbalance:.4f}  "
          f"messages/step: {max(rep.messages) if rep.messages else 0}  "
          f"migrated: {rep.migrated}")
    if config.out_dir:
        print(f"reports in {config.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
