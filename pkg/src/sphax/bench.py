"""Benchmark the compiled kernel core against the NumPy fallback.

Runs the same clustered one-step workload through both backends (when the
extension is built) and prints per-step wall times plus the ratio.
"""

from __future__ import annotations

import argparse
import time

from . import backend
from .harness import RunConfig, build_engine, generate_ics


def time_step(config: RunConfig, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        engine = build_engine(config, pset=generate_ics(config))
        t0 = time.perf_counter()
        engine.step()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="sphax-bench")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)

    config = RunConfig(n=args.n, ic="clustered", steps=3, workers=args.workers,
                       split_threshold=200, min_cell_occupancy=32.0, seed=7)
    avail = backend.available()
    print(f"backends available: {avail}")
    results = {}
    for name in ("python", "compiled"):
        if not avail.get(name):
            continue
        backend.use(name)
        results[name] = time_step(config, args.reps)
        print(f"{name:>9}: one density+force+kick step, N={args.n}: "
              f"{results[name] * 1e3:.1f} ms")
    if len(results) == 2:
        print(f"speed ratio (python / compiled): "
              f"{results['python'] / results['compiled']:.1f}x")
    backend.use("compiled" if avail.get("compiled") else "python")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
