"""Task scheduler: dependency enforcement, conflict resources, work stealing.

One scheduler instance drives one step on one rank.  Workers pull tasks
from per-worker deques (owner-side LIFO, steal-side FIFO) with a separate
high-priority queue for communication tasks; resource acquisition is
all-or-nothing, in ascending resource-id order, and a task that fails to
lock is requeued rather than blocking its worker.  ``recv``-style tasks
are completed externally (by the transport pump) instead of being grabbed
by a worker.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import deque

TASK_KINDS = ("sort", "density_self", "density_pair", "ghost",
              "force_self", "force_pair", "kick", "send", "recv")
COMM_KINDS = frozenset(("send", "recv"))

_DONE = object()


class SchedulerError(Exception):
    pass


class CycleError(SchedulerError):
    def __init__(self, witness):
        self.witness = list(witness)
        path = " -> ".join(str(t) for t in self.witness)
        super().__init__(f"dependency cycle among tasks: {path}")


class TaskFailed(SchedulerError):
    def __init__(self, tid, exc):
        self.tid = tid
        self.cause = exc
        super().__init__(f"task {tid} failed: {exc!r}")


class SchedulerStalled(SchedulerError):
    pass


class Task:
    __slots__ = ("tid", "kind", "cells", "resources", "cost_estimate", "fn",
                 "external", "unlocks", "deps", "wait_count", "worker",
                 "start_ns", "end_ns", "cost_measured", "done")

    def __init__(self, tid, kind, cells, resources, cost_estimate, fn, external):
        self.tid = tid
        self.kind = kind
        self.cells = tuple(cells)
        self.resources = tuple(sorted(resources))
        self.cost_estimate = float(cost_estimate)
        self.fn = fn
        self.external = external
        self.unlocks: list[int] = []
        self.deps: list[int] = []
        self.wait_count = 0
        self.worker = -1
        self.start_ns = -1
        self.end_ns = -1
        self.cost_measured: float | None = None
        self.done = False

    def __repr__(self):
        return f"Task({self.tid}, {self.kind}, cells={self.cells})"


class Scheduler:
    """Per-rank, per-step task table and executor."""

    def __init__(self, rank: int = 0, idle_hook=None, stall_timeout: float = 30.0):
        self.rank = rank
        self.tasks: list[Task] = []
        self.idle_hook = idle_hook
        self.stall_timeout = stall_timeout
        self._sealed = False
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._held: set = set()
        self._blocked: dict = {}   # resource id -> tids parked on it
        self._deques: list[deque] = []
        self._comm: deque = deque()
        self._done_count = 0
        self._failure: BaseException | None = None
        self._abort = False
        self._last_progress = 0.0
        self.worker_busy_ns: list[int] = []
        self.wall_ns = 0

    # ------------------------------------------------------------------
    # graph construction
    # ------------------------------------------------------------------

    def declare_task(self, kind, cells, resources=(), cost_estimate=0.0,
                     fn=None, external=False) -> int:
        if self._sealed:
            raise SchedulerError("task table is sealed")
        if kind not in TASK_KINDS:
            raise SchedulerError(f"unknown task kind {kind!r}")
        cells = tuple(cells)
        if not cells:
            raise SchedulerError("cell_refs must be non-empty")
        resources = tuple(resources)
        if len(set(resources)) != len(resources):
            raise SchedulerError(f"duplicate resource in {resources}")
        tid = len(self.tasks)
        self.tasks.append(Task(tid, kind, cells, resources, cost_estimate, fn, external))
        return tid

    def add_dependency(self, dependent: int, prerequisite: int) -> None:
        if self._sealed:
            raise SchedulerError("task table is sealed")
        try:
            dep = self.tasks[dependent]
            pre = self.tasks[prerequisite]
        except IndexError:
            raise SchedulerError(
                f"unknown task id in dependency {dependent} -> {prerequisite}") from None
        pre.unlocks.append(dep.tid)
        dep.deps.append(pre.tid)
        dep.wait_count += 1

    def seal(self) -> None:
        if self._sealed:
            raise SchedulerError("seal() called twice")
        self._check_acyclic()
        self._sealed = True

    def _check_acyclic(self) -> None:
        indeg = [t.wait_count for t in self.tasks]
        stack = [t.tid for t in self.tasks if t.wait_count == 0]
        seen = 0
        while stack:
            tid = stack.pop()
            seen += 1
            for nxt in self.tasks[tid].unlocks:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    stack.append(nxt)
        if seen != len(self.tasks):
            raise CycleError(self._cycle_witness(indeg))

    def _cycle_witness(self, indeg) -> list[int]:
        # Walk unsatisfied prerequisites until a task repeats.
        start = next(t.tid for t in self.tasks if indeg[t.tid] > 0)
        seen_at: dict[int, int] = {}
        path = []
        cur = start
        while cur not in seen_at:
            seen_at[cur] = len(path)
            path.append(cur)
            cur = next(p for p in self.tasks[cur].deps if indeg[p] > 0)
        return path[seen_at[cur]:] + [cur]

    # ------------------------------------------------------------------
    # execution
    # ------------------------------------------------------------------

    def ready_tasks(self) -> list[int]:
        """Zero-wait, internally-runnable task ids (diagnostic view)."""
        return [t.tid for t in self.tasks
                if t.wait_count == 0 and not t.external and not t.done]

    def run(self, workers: int = 1):
        if not self._sealed:
            raise SchedulerError("run() before seal()")
        if workers < 1:
            raise SchedulerError("workers must be >= 1")
        t_begin = time.monotonic_ns()
        self._deques = [deque() for _ in range(workers)]
        self._comm = deque()
        self.worker_busy_ns = [0] * workers
        self._done_count = sum(1 for t in self.tasks if t.done)
        self._last_progress = time.monotonic()
        # Seed ready queues: ascending cost so LIFO pops take big tasks first,
        # comm tasks into their own priority queue.
        initial = [t for t in self.tasks
                   if t.wait_count == 0 and not t.done and not t.external]
        if workers == 1:
            # Serial runs must stay bitwise reproducible, so order by task id
            # only (measured costs vary run to run and must not steer order).
            initial.sort(key=lambda t: t.tid, reverse=True)
        else:
            initial.sort(key=lambda t: t.cost_estimate)
        for i, task in enumerate(initial):
            if task.kind in COMM_KINDS:
                self._comm.append(task.tid)
            else:
                self._deques[i % workers].append(task.tid)

        if workers == 1:
            self._worker_loop(0)
        else:
            threads = [threading.Thread(target=self._worker_loop, args=(w,),
                                        name=f"sphax-r{self.rank}-w{w}", daemon=True)
                       for w in range(workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        self.wall_ns = time.monotonic_ns() - t_begin
        if self._failure is not None:
            raise self._failure
        if self._done_count != len(self.tasks):
            raise SchedulerError(
                f"run() ended with {self._done_count}/{len(self.tasks)} tasks done")
        return self.tasks

    def _worker_loop(self, wid: int) -> None:
        try:
            while True:
                nxt = self._acquire_next(wid)
                if nxt is _DONE:
                    return
                if nxt is None:
                    progressed = False
                    if self.idle_hook is not None:
                        try:
                            progressed = bool(self.idle_hook())
                        except BaseException as exc:
                            self._fail(exc)
                            return
                    if not progressed:
                        with self._cond:
                            if self._done_count < len(self.tasks) and not self._abort:
                                self._cond.wait(0.0005)
                        if time.monotonic() - self._last_progress > self.stall_timeout:
                            self._fail(SchedulerStalled(
                                f"no progress for {self.stall_timeout}s "
                                f"({self._done_count}/{len(self.tasks)} done)"))
                            return
                    continue
                self._execute(nxt, wid)
        except BaseException as exc:  # pragma: no cover - defensive
            self._fail(exc)

    def _acquire_next(self, wid: int):
        with self._lock:
            if self._abort or self._done_count == len(self.tasks):
                self._cond.notify_all()
                return _DONE
            while True:
                tid = self._pop_candidate(wid)
                if tid is None:
                    return None
                task = self.tasks[tid]
                # All-or-nothing try-lock in ascending resource order.  A
                # blocked task parks on the busy resource and is revived
                # when that resource is released, so workers never rescan.
                acquired = []
                blocker = None
                for rid in task.resources:
                    if rid in self._held:
                        for got in acquired:
                            self._held.discard(got)
                        blocker = rid
                        break
                    self._held.add(rid)
                    acquired.append(rid)
                if blocker is None:
                    return task
                self._blocked.setdefault(blocker, []).append(tid)

    def _pop_candidate(self, wid: int):
        if self._comm:
            return self._comm.popleft()
        own = self._deques[wid]
        if own:
            return own.pop()
        n = len(self._deques)
        for off in range(1, n):
            victim = self._deques[(wid + off) % n]
            if victim:
                return victim.popleft()
        return None

    def _execute(self, task: Task, wid: int) -> None:
        task.worker = wid
        task.start_ns = time.monotonic_ns()
        try:
            if task.fn is not None:
                task.fn()
        except BaseException as exc:
            task.end_ns = time.monotonic_ns()
            with self._lock:
                for rid in task.resources:
                    self._held.discard(rid)
                    self._revive_locked(rid, wid)
            self._fail(TaskFailed(task.tid, exc))
            return
        task.end_ns = time.monotonic_ns()
        task.cost_measured = (task.end_ns - task.start_ns) * 1e-9
        self.worker_busy_ns[wid] += task.end_ns - task.start_ns
        with self._lock:
            for rid in task.resources:
                self._held.discard(rid)
                self._revive_locked(rid, wid)
            self._complete_locked(task, wid)

    def _revive_locked(self, rid, wid: int) -> None:
        parked = self._blocked.pop(rid, None)
        if parked:
            for tid in parked:
                if self.tasks[tid].kind in COMM_KINDS:
                    self._comm.append(tid)
                else:
                    self._deques[wid].append(tid)

    def _complete_locked(self, task: Task, wid: int) -> None:
        task.done = True
        self._done_count += 1
        self._last_progress = time.monotonic()
        released = 0
        for dep_tid in task.unlocks:
            dep = self.tasks[dep_tid]
            dep.wait_count -= 1
            if dep.wait_count == 0 and not dep.external:
                released += 1
                # Before run() the queues do not exist yet; its initial scan
                # picks these tasks up (external completions may arrive early).
                if not self._deques:
                    continue
                if dep.kind in COMM_KINDS:
                    self._comm.append(dep_tid)
                else:
                    self._deques[wid].append(dep_tid)
        if self._done_count == len(self.tasks):
            self._cond.notify_all()
        elif released:
            self._cond.notify(released)

    def complete_external(self, tid: int) -> None:
        """Mark an external (recv-style) task complete; thread-safe."""
        now = time.monotonic_ns()
        with self._lock:
            task = self.tasks[tid]
            if not task.external:
                raise SchedulerError(f"task {tid} is not externally completed")
            if task.done:
                raise SchedulerError(f"external task {tid} completed twice")
            if task.wait_count != 0:
                raise SchedulerError(
                    f"external task {tid} completed with {task.wait_count} "
                    "unresolved dependencies")
            task.start_ns = task.end_ns = now
            task.cost_measured = 0.0
            task.worker = -1
            self._complete_locked(task, 0)

    def _fail(self, exc: BaseException) -> None:
        with self._lock:
            if self._failure is None:
                self._failure = exc
            self._abort = True
            self._cond.notify_all()

    # ------------------------------------------------------------------
    # resource access for the transport pump
    # ------------------------------------------------------------------

    def try_lock(self, resources) -> bool:
        with self._lock:
            got = []
            for rid in sorted(resources):
                if rid in self._held:
                    for r in got:
                        self._held.discard(r)
                    return False
                self._held.add(rid)
                got.append(rid)
            return True

    def unlock(self, resources) -> None:
        with self._lock:
            for rid in resources:
                self._held.discard(rid)
                self._revive_locked(rid, 0)
            self._cond.notify_all()

    # ------------------------------------------------------------------
    # reporting
    # ------------------------------------------------------------------

    def trace_rows(self):
        return [(t.tid, t.kind, self.rank, t.worker, t.start_ns, t.end_ns,
                 t.cost_estimate) for t in self.tasks]

    @staticmethod
    def write_trace(path, rows) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "kind", "rank", "worker", "start_ns", "end_ns",
                          "cost_estimate"])
            out.writerows(rows)
