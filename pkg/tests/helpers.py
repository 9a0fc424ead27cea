"""Shared test utilities: scheduler audits and random DAG generation."""

from __future__ import annotations

import numpy as np

from sphax.sched import Scheduler


def random_dag_scheduler(rng, n_tasks: int, n_resources: int = 64,
                         edge_factor: float = 2.0, sleepers: float = 0.3,
                         rank: int = 0) -> Scheduler:
    """Random acyclic task set with conflicts and randomized durations."""
    import time
    sched = Scheduler(rank=rank)
    durations = np.where(rng.random(n_tasks) < sleepers,
                         rng.uniform(2e-5, 1e-4, n_tasks), 0.0)
    kinds = rng.choice(["density_self", "force_self", "ghost", "kick"], n_tasks)
    for i in range(n_tasks):
        resources = ()
        if rng.random() < 0.5:
            a = int(rng.integers(0, n_resources))
            b = int(rng.integers(0, n_resources))
            resources = (a,) if a == b else (a, b)
        dur = float(durations[i])
        fn = (lambda d=dur: time.sleep(d)) if dur > 0 else None
        sched.declare_task(str(kinds[i]), (i,), resources,
                           float(rng.uniform(0.5, 2.0)), fn=fn)
    n_edges = int(edge_factor * n_tasks)
    for _ in range(n_edges):
        a, b = rng.integers(0, n_tasks, 2)
        if a == b:
            continue
        lo, hi = (int(min(a, b)), int(max(a, b)))
        sched.add_dependency(hi, lo)  # edges point forward: acyclic
    return sched


def audit_run(sched: Scheduler) -> None:
    """Assert dependency order, conflict exclusion, exactly-once execution."""
    tasks = sched.tasks
    for t in tasks:
        assert t.done, f"task {t.tid} never executed"
        assert t.start_ns >= 0 and t.end_ns >= t.start_ns
        for pre in t.deps:
            p = tasks[pre]
            assert p.end_ns <= t.start_ns, (
                f"dependency violated: {p.tid} finished {p.end_ns} after "
                f"{t.tid} started {t.start_ns}")
    by_resource: dict = {}
    for t in tasks:
        for rid in t.resources:
            by_resource.setdefault(rid, []).append((t.start_ns, t.end_ns, t.tid))
    for rid, intervals in by_resource.items():
        intervals.sort()
        for (s0, e0, t0), (s1, e1, t1) in zip(intervals, intervals[1:]):
            assert e0 <= s1, (
                f"conflict violated on resource {rid}: tasks {t0} and {t1} "
                f"overlap ([{s0},{e0}] vs [{s1},{e1}])")
