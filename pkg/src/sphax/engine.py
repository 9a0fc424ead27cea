"""Multi-rank simulation engine.

The driver owns the step loop: (re)build the shared cell structure, hand
each simulated rank its particles, instantiate the per-rank task graphs
(compute tasks from the blueprint, plus send/recv tasks from the
communication plan), run all ranks concurrently, then handle migration,
rebuild triggers and the repartition cadence between steps.

Rank isolation: a rank mutates only the particles it owns; remote data
enters only through transport messages applied to proxy cells, and
particle ownership moves only through the serialized migration path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .exchange import (PHASE_DENSITY, PHASE_FORCE, CommPlan, Endpoint, Message,
                       MessagePump, ProxyCell, TransportNetwork, encode_message,
                       pack_migration, plan_communications, unpack_migration)
from .grid import AXIS_VECTORS, Blueprint, Grid, build_grid, make_tasks
from .partition import (CellGraph, build_cell_graph, evaluate_partition,
                        partition, repartition)
from .sched import Scheduler
from .sph import ParticleSet, SphaxError, SphConfig, cfl_timestep


class EngineError(SphaxError):
    pass


@dataclass
class StepStats:
    wall_ns: int = 0
    messages: int = 0
    message_bytes: int = 0
    migrated: int = 0
    capped: int = 0
    repartitioned: bool = False
    rebuilt: bool = False
    rank_task_seconds: list = field(default_factory=list)
    rank_busy_ns: list = field(default_factory=list)
    flush_wait_ns: int = 0   # barriered mode: max per-rank in-flight stall
    send_burst_ns: int = 0   # barriered mode: max per-rank send-burst time


class Rank:
    """One simulated rank: private particle store plus step-local state."""

    def __init__(self, rank_id: int, endpoint: Endpoint):
        self.rank_id = rank_id
        self.endpoint = endpoint
        self.pset = None          # ParticleSet of owned particles
        self.top_offsets = {}     # top cid -> offset of its range in the store
        self.proxies = {}         # cid -> ProxyCell
        self.sorts = {}           # cid -> {axis: SortData}
        self.h_dyn = {}           # cid -> current h_max (leaves + proxies)
        self.scheduler = None
        self.pump = None
        self.capped = 0

    def local_range(self, grid: Grid, cid: int):
        cell = grid.cells[cid]
        top = grid.cells[cell.top_id]
        off = self.top_offsets[cell.top_id]
        return off + cell.start - top.start, off + cell.end - top.start

    def view(self, grid: Grid, cid: int, owner_of):
        if owner_of[grid.cells[cid].top_id] == self.rank_id:
            s, e = self.local_range(grid, cid)
            return self.pset, s, e, True
        proxy = self.proxies[cid]
        return proxy, 0, proxy.n, False


class Engine:
    def __init__(self, pset: ParticleSet, box, cfg: SphConfig, ranks: int = 1,
                 workers: int = 1, split_threshold: int = 100,
                 reach_slack: float = 1.5, min_cell_occupancy: float = 0.0,
                 repart_period: int = 100, network: TransportNetwork | None = None,
                 barriered: bool = False, stall_timeout: float = 30.0,
                 deterministic: bool | None = None):
        self.box = np.asarray(box, dtype=float)
        self.cfg = cfg
        self.k = ranks
        self.workers = workers
        self.split_threshold = split_threshold
        self.reach_slack = reach_slack
        self.min_cell_occupancy = min_cell_occupancy
        self.repart_period = repart_period
        self.barriered = barriered
        self.stall_timeout = stall_timeout
        self.network = network or TransportNetwork(ranks)
        self.ranks = [Rank(r, self.network.endpoint(r)) for r in range(ranks)]
        self.grid: Grid | None = None
        self.blueprint: Blueprint | None = None
        self.owner_of: dict = {}
        self.plan: CommPlan = CommPlan()
        self.cost_map: dict = {}      # (kind, cells) -> [sum_seconds, count]
        self.need_rebuild = True
        self.h_hint = 0.0
        self.step_number = 0
        self.dt = cfg.dt if cfg.dt is not None else cfl_timestep(pset, cfg)
        if self.dt <= 0.0:
            raise EngineError("timestep must be positive")
        self.u_floor = 1e-12 * float(np.mean(pset.u))
        self.total_mass = float(pset.m.sum())
        self.repartition_steps: list = []
        self.stats_history: list = []
        self._flush_ns = [0] * ranks
        self._union = pset.copy()
        self._union_src = np.full(len(pset), -1)

    # ------------------------------------------------------------------
    # structure (driver-side): build, distribute, migrate
    # ------------------------------------------------------------------

    def _gather_union(self):
        """Reassemble the global store in cell order from the rank stores."""
        if self.grid is None:
            return self._union, self._union_src
        n = sum(len(r.pset) for r in self.ranks)
        union = ParticleSet.empty(n)
        src = np.empty(n, dtype=int)
        for top in sorted(int(c) for c in self.grid.top_ids.ravel()):
            cell = self.grid.cells[top]
            if cell.count == 0:
                continue
            owner = self.owner_of[top]
            rank = self.ranks[owner]
            s, e = rank.local_range(self.grid, top)
            for name in ("x", "v", "v_pred", "m", "u", "h", "rho", "rho_dh",
                         "wcount", "wcount_dh", "a", "u_dot", "omega", "P",
                         "pid"):
                getattr(union, name)[cell.start:cell.end] = getattr(rank.pset, name)[s:e]
            src[cell.start:cell.end] = owner
        return union, src

    def rebuild(self) -> int:
        """Full structure rebuild + particle redistribution; returns moves."""
        union, src = self._gather_union()
        old_grid, old_owner = self.grid, dict(self.owner_of)
        grid, perm = build_grid(union.x, union.h, self.box,
                                split_threshold=self.split_threshold,
                                reach_slack=self.reach_slack,
                                h_max_hint=self.h_hint,
                                min_cell_occupancy=self.min_cell_occupancy)
        union.permute(perm)
        src = src[perm]
        self.grid = grid
        self.blueprint = make_tasks(grid)
        self.h_hint = 0.0
        self.cost_map = {}  # cell ids change meaning across rebuilds

        tops = sorted(int(c) for c in grid.top_ids.ravel())
        if old_grid is None:
            graph = build_cell_graph(self.blueprint, grid)
            result = partition(graph, self.k)
            self.owner_of = result.by_cell(graph)
        else:
            # Carry ownership over spatially: new top -> old owner at its centre.
            self.owner_of = {}
            for top in tops:
                centre = 0.5 * (grid.cells[top].lo + grid.cells[top].hi)
                self.owner_of[top] = old_owner[old_grid.top_of_position(centre)]
        for top in tops:
            grid.cells[top].owner_rank = self.owner_of[top]

        moved = self._distribute(union, src)
        self._after_structure_change()
        self.need_rebuild = False
        return moved

    def apply_assignment(self, new_owner: dict) -> int:
        """Repartition apply: same grid, new owners, whole cells migrate."""
        union, src = self._gather_union()
        self.owner_of = dict(new_owner)
        for top, owner in self.owner_of.items():
            self.grid.cells[top].owner_rank = owner
        moved = self._distribute(union, src)
        self._after_structure_change()
        return moved

    def _distribute(self, union: ParticleSet, src) -> int:
        """Split the union store into per-rank stores (serializing movers)."""
        grid = self.grid
        tops = sorted(int(c) for c in grid.top_ids.ravel())
        moved_total = 0
        for rank in self.ranks:
            rank.top_offsets = {}
            mine = []
            offset = 0
            for top in tops:
                if self.owner_of[top] != rank.rank_id:
                    continue
                cell = grid.cells[top]
                rank.top_offsets[top] = offset
                offset += cell.count
                if cell.count:
                    mine.append((cell.start, cell.end))
            idx = (np.concatenate([np.arange(s, e) for s, e in mine])
                   if mine else np.arange(0))
            pset = union.select(idx)
            movers = np.nonzero(src[idx] != rank.rank_id)[0]
            moved_total += len(movers)
            if len(movers):
                # Real serialized hand-off for particles changing ranks.
                sub = unpack_migration(pack_migration(pset, movers))
                pset.x[movers] = sub.x
                pset.v[movers] = sub.v
                pset.v_pred[movers] = sub.v_pred
                pset.m[movers] = sub.m
                pset.u[movers] = sub.u
                pset.h[movers] = sub.h
                pset.pid[movers] = sub.pid
            rank.pset = pset
        return moved_total

    def _after_structure_change(self):
        grid = self.grid
        self.plan = plan_communications(self.blueprint, grid, self.owner_of)
        for rank in self.ranks:
            rank.sorts = {}
            rank.h_dyn = {cid: grid.cells[cid].h_max for cid in grid.leaves}
            rank.proxies = {}
            for cell, _src, _phase in self.plan.recvs.get(rank.rank_id, []):
                if cell not in rank.proxies:
                    rank.proxies[cell] = ProxyCell(
                        cell, self.owner_of[grid.cells[cell].top_id],
                        grid.cells[cell].count)

    # ------------------------------------------------------------------
    # per-step task instantiation
    # ------------------------------------------------------------------

    def _build_rank_step(self, rank: Rank, stage: str = "all") -> Scheduler:
        """Declare this rank's tasks for the step (or a barriered stage)."""
        grid, bp = self.grid, self.blueprint
        rid = rank.rank_id
        kern = backend.active()
        sched = Scheduler(rank=rid, stall_timeout=self.stall_timeout)
        step = self.step_number
        include_compute = {"all": None,
                           "sorts": {"sort"},
                           "density": {"density_self", "density_pair", "ghost"},
                           "force": {"force_self", "force_pair", "kick"}}[stage]

        def owner(cid):
            return self.owner_of[grid.cells[cid].top_id]

        def executes(spec) -> bool:
            if len(spec.cells) == 1:
                return owner(spec.cells[0]) == rid
            return rid in (owner(spec.cells[0]), owner(spec.cells[1]))

        # One buffer-acquired bundle per store, reused by every task body.
        own_ca = kern.cell_arrays(rank.pset)
        proxy_ca = {cid: kern.cell_arrays(p) for cid, p in rank.proxies.items()}

        def view_ca(cid):
            if owner(cid) == rid:
                s, e = rank.local_range(grid, cid)
                return own_ca, s, e, True
            return proxy_ca[cid], 0, rank.proxies[cid].n, False

        # --- task bodies ------------------------------------------------
        def make_sort(cid, axes):
            ca, s, e, _ = view_ca(cid)
            def body():
                entry = {}
                for axis in axes:
                    idx, proj = kern.sort_cell(ca, s, e, AXIS_VECTORS[axis])
                    entry[axis] = (step, idx, proj)
                rank.sorts[cid] = entry
            return body

        def make_density_self(cid):
            ca, s, e, _ = view_ca(cid)
            def body():
                kern.self_density(ca, s, e)
            return body

        def make_pair(cid_a, cid_b, axis, shift, phase):
            ca, _, _, own_a = view_ca(cid_a)
            cb, _, _, own_b = view_ca(cid_b)
            sx, sy, sz = float(shift[0]), float(shift[1]), float(shift[2])
            proj_shift = float(shift @ AXIS_VECTORS[axis])
            fn = kern.pair_density if phase == PHASE_DENSITY else kern.pair_force
            def body():
                tag_a, idx_a, proj_a = rank.sorts[cid_a][axis]
                tag_b, idx_b, proj_b = rank.sorts[cid_b][axis]
                if tag_a != step or tag_b != step:
                    from .grid import StaleSortError
                    raise StaleSortError(
                        f"stale sort for pair ({cid_a},{cid_b}) at step {step}")
                reach = max(rank.h_dyn[cid_a], rank.h_dyn[cid_b])
                fn(ca, idx_a, proj_a, cb, idx_b, proj_b,
                   sx, sy, sz, proj_shift, reach, own_a, own_b)
            return body

        def make_ghost(cid):
            ca, s, e, _ = view_ca(cid)
            pset = rank.pset
            neigh = [(rank.view(grid, other, self.owner_of), shift)
                     for other, shift in bp.neighbours.get(cid, [])]
            h_limit = grid.reach(cid)
            def body():
                xs = [pset.x[s:e]]
                ms = [pset.m[s:e]]
                for (po, so, eo, _own), shift in neigh:
                    xs.append(po.x[so:eo] + shift)
                    ms.append(po.m[so:eo])
                cand_x = np.ascontiguousarray(np.concatenate(xs))
                cand_m = np.ascontiguousarray(np.concatenate(ms))
                capped = kern.ghost_update(
                    ca, s, e, cand_x, cand_m, self.cfg.eta_neigh,
                    self.cfg.h_tolerance, self.cfg.h_max_iter, h_limit,
                    self.cfg.gamma)
                rank.capped += int(capped)
                rank.h_dyn[cid] = float(pset.h[s:e].max())
            return body

        def make_force_self(cid):
            ca, s, e, _ = view_ca(cid)
            def body():
                kern.self_force(ca, s, e)
            return body

        def make_kick(cid):
            ca, s, e, _ = view_ca(cid)
            def body():
                kern.kick(ca, self.dt, self.box, self.u_floor, s, e)
            return body

        def make_send(cid, dest, phase):
            def body():
                self._send_payload(rank, cid, dest, phase)
            return body

        # --- declare compute tasks ---------------------------------------
        tid_of: dict = {}
        for i, spec in enumerate(bp.specs):
            if not executes(spec):
                continue
            if include_compute is not None and spec.kind not in include_compute:
                continue
            if spec.kind == "sort":
                fn = make_sort(spec.cells[0], spec.axes)
            elif spec.kind == "density_self":
                fn = make_density_self(spec.cells[0])
            elif spec.kind == "ghost":
                fn = make_ghost(spec.cells[0])
            elif spec.kind == "force_self":
                fn = make_force_self(spec.cells[0])
            elif spec.kind == "kick":
                fn = make_kick(spec.cells[0])
            else:
                a, b = spec.cells
                phase = PHASE_DENSITY if spec.kind == "density_pair" else PHASE_FORCE
                fn = make_pair(a, b, spec.axis, spec.shift, phase)
            cost = self._seeded_cost(spec)
            tid_of[i] = sched.declare_task(spec.kind, spec.cells, spec.cells,
                                           cost, fn=fn)

        # --- proxy sorts --------------------------------------------------
        proxy_axes: dict = {}
        for i, spec in enumerate(bp.specs):
            if spec.kind != "density_pair" or i not in tid_of:
                continue
            for cid in spec.cells:
                if owner(cid) != rid:
                    proxy_axes.setdefault(cid, set()).add(spec.axis)
        proxy_sort_tid: dict = {}
        if include_compute is None or "sort" in include_compute or stage == "density":
            for cid in sorted(proxy_axes):
                axes = tuple(sorted(proxy_axes[cid]))
                proxy_sort_tid[cid] = sched.declare_task(
                    "sort", (cid,), (cid,), 0.0, fn=make_sort(cid, axes))

        # --- sends / recvs --------------------------------------------
        send_tid: dict = {}
        recv_tid: dict = {}
        # Barriered stages carry no send tasks: the reference mode fires
        # communication in its explicit exchange phases, unoverlapped.
        stage_phases = {"all": (PHASE_DENSITY, PHASE_FORCE),
                        "sorts": (),
                        "density": (),
                        "force": ()}[stage]
        recv_phases = {"all": (PHASE_DENSITY, PHASE_FORCE),
                       "sorts": (),
                       "density": (PHASE_DENSITY,),
                       "force": (PHASE_FORCE,)}[stage]
        for cell, dest, phase in self.plan.sends.get(rid, []):
            if phase not in stage_phases:
                continue
            send_tid[(cell, dest, phase)] = sched.declare_task(
                "send", (cell,), (cell,), 0.5, fn=make_send(cell, dest, phase))
        for cell, src, phase in self.plan.recvs.get(rid, []):
            if phase not in recv_phases:
                continue
            recv_tid[(cell, phase)] = sched.declare_task(
                "recv", (cell,), (), 0.25, external=True)

        # --- dependencies -----------------------------------------------
        for i, spec in enumerate(bp.specs):
            if i not in tid_of:
                continue
            tid = tid_of[i]
            for d in spec.deps:
                if d in tid_of:
                    sched.add_dependency(tid, tid_of[d])
                    continue
                dep_spec = bp.specs[d]
                cid = dep_spec.cells[0]
                if dep_spec.kind == "sort":
                    if cid in proxy_sort_tid:
                        sched.add_dependency(tid, proxy_sort_tid[cid])
                    # else: barriered stage boundary provides the ordering
                elif dep_spec.kind == "ghost":
                    if (cid, PHASE_FORCE) in recv_tid:
                        sched.add_dependency(tid, recv_tid[(cid, PHASE_FORCE)])
        for cid, tid in proxy_sort_tid.items():
            if (cid, PHASE_DENSITY) in recv_tid:
                sched.add_dependency(tid, recv_tid[(cid, PHASE_DENSITY)])
        for (cell, dest, phase), tid in send_tid.items():
            sort_spec = bp.sort_id.get(cell)
            ghost_spec = bp.self_ids.get(("ghost", cell))
            if phase == PHASE_DENSITY and sort_spec in tid_of:
                sched.add_dependency(tid, tid_of[sort_spec])
            elif phase == PHASE_FORCE and ghost_spec in tid_of:
                sched.add_dependency(tid, tid_of[ghost_spec])

        def on_apply(msg):
            if msg.phase == PHASE_FORCE:
                rank.h_dyn[msg.cell] = float(rank.proxies[msg.cell].h.max()) \
                    if rank.proxies[msg.cell].n else 0.0

        pump = MessagePump(rid, rank.endpoint, sched, rank.proxies,
                           self.step_number, recv_tid, on_apply=on_apply)
        # Staged (barriered) schedulers complete their recvs in the explicit
        # inter-phase flush instead of from idle workers.
        sched.idle_hook = pump if stage == "all" else None
        rank.scheduler = sched
        rank.pump = pump
        sched.seal()
        return sched

    def _send_payload(self, rank: Rank, cid: int, dest: int, phase: int) -> None:
        pset = rank.pset
        s, e = rank.local_range(self.grid, cid)
        if phase == PHASE_DENSITY:
            # the wire 'v' fields carry the predicted velocities the force
            # phase consumes
            payload = np.column_stack([
                pset.x[s:e], pset.v_pred[s:e], pset.m[s:e], pset.h[s:e],
                pset.u[s:e]])
        else:
            payload = np.column_stack([
                pset.rho[s:e], pset.omega[s:e], pset.h[s:e], pset.P[s:e]])
        rank.endpoint.send(dest, encode_message(
            Message(self.step_number, phase, cid, payload)))

    def _seeded_cost(self, spec) -> float:
        entry = self.cost_map.get((spec.kind, spec.cells))
        if entry is not None and entry[1] > 0:
            return entry[0] / entry[1]
        return spec.cost

    # ------------------------------------------------------------------
    # stepping
    # ------------------------------------------------------------------

    def step(self) -> StepStats:
        import time
        stats = StepStats()
        if self.need_rebuild:
            stats.migrated += self.rebuild()
            stats.rebuilt = True
        self.step_number += 1
        for rank in self.ranks:
            rank.pset.zero_density_accumulators()
            rank.pset.zero_force_accumulators()
            rank.capped = 0
        self.network.reset_stats()

        self._flush_ns = [0] * self.k
        self._burst_ns = [0] * self.k
        t0 = time.monotonic_ns()
        if self.barriered and self.k > 1:
            self._run_barriered()
        else:
            self._run_async()
        stats.wall_ns = time.monotonic_ns() - t0
        stats.flush_wait_ns = max(self._flush_ns)
        stats.send_burst_ns = max(self._burst_ns)

        stats.messages, stats.message_bytes = self.network.reset_stats()
        stats.capped = sum(r.capped for r in self.ranks)
        if stats.capped:
            # Gentle headroom: capped h already grew to the reach limit, so a
            # modest inflation per rebuild lets it keep growing across steps.
            # The hint saturates at the structural ceiling (3 cells per axis);
            # particles pinned there stay under-resolved rather than erroring.
            ceiling = float(np.min(self.box)) / 3.0 * (1.0 - 1e-12)
            hint = min(1.25 * max(float(r.pset.h.max())
                                  for r in self.ranks if len(r.pset)), ceiling)
            if hint > self.grid.h_max_global * 1.0001:
                self.h_hint = hint
                self.need_rebuild = True
        if self._strays():
            self.need_rebuild = True
        self._harvest_costs(stats)
        if (self.repart_period > 0 and self.step_number % self.repart_period == 0):
            stats.repartitioned = True
            self.repartition_steps.append(self.step_number)
            stats.migrated += self._repartition()
        self.stats_history.append(stats)
        return stats

    def _run_async(self):
        scheds = [self._build_rank_step(rank) for rank in self.ranks]
        if self.k == 1:
            scheds[0].run(self.workers)
            return
        errors = []
        def run_rank(s):
            try:
                s.run(self.workers)
            except BaseException as exc:
                errors.append(exc)
        threads = [threading.Thread(target=run_rank, args=(s,), daemon=True)
                   for s in scheds]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]

    def _run_barriered(self):
        """Reference bulk-synchronous mode: flush communication between phases.

        All stage graphs are built before any stage runs, so the inter-phase
        flushes measure nothing but communication completion (the point of
        this mode is to expose un-hidden latency).
        """
        barrier = threading.Barrier(self.k)
        errors = []

        def run_rank(rank: Rank):
            try:
                s_sorts = self._build_rank_step(rank, "sorts")
                s_density = self._build_rank_step(rank, "density")
                pump_density = rank.pump
                s_force = self._build_rank_step(rank, "force")
                pump_force = rank.pump
                sends = self.plan.sends.get(rank.rank_id, [])
                barrier.wait()
                s_sorts.run(self.workers)
                barrier.wait()
                # exchange phase 1: burst the density payloads, wait them out
                self._send_burst(rank, sends, PHASE_DENSITY)
                self._flush(rank, pump_density)
                barrier.wait()
                s_density.run(self.workers)
                barrier.wait()
                # exchange phase 2: force payloads
                self._send_burst(rank, sends, PHASE_FORCE)
                self._flush(rank, pump_force)
                barrier.wait()
                s_force.run(self.workers)
                rank.scheduler = s_force
            except BaseException as exc:
                errors.append(exc)
                try:
                    barrier.abort()
                except Exception:
                    pass

        threads = [threading.Thread(target=run_rank, args=(r,), daemon=True)
                   for r in self.ranks]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]

    def _send_burst(self, rank: Rank, sends, phase: int) -> None:
        import time
        t0 = time.monotonic_ns()
        for cell, dest, ph in sends:
            if ph == phase:
                self._send_payload(rank, cell, dest, ph)
        self._burst_ns[rank.rank_id] += time.monotonic_ns() - t0

    def _flush(self, rank: Rank, pump):
        """Busy-wait (pump only) until every expected recv has been applied.

        Accounts the time stalled on messages that are in the transport but
        not yet deliverable: the latency cost the bulk-synchronous pattern
        cannot hide (thread-scheduling skew between ranks is not counted).
        """
        import time
        deadline = time.monotonic() + self.stall_timeout
        while pump.outstanding() > 0:
            if not pump():
                if time.monotonic() > deadline:
                    raise EngineError(
                        f"rank {rank.rank_id} flush stalled waiting for "
                        f"{pump.outstanding()} messages")
                t0 = time.monotonic_ns()
                in_flight = rank.endpoint.queued() > 0
                time.sleep(1e-4)
                if in_flight:
                    self._flush_ns[rank.rank_id] += time.monotonic_ns() - t0

    def _strays(self) -> bool:
        for rank in self.ranks:
            for cid in self.grid.leaves:
                cell = self.grid.cells[cid]
                if cell.count == 0 or self.owner_of[cell.top_id] != rank.rank_id:
                    continue
                s, e = rank.local_range(self.grid, cid)
                x = rank.pset.x[s:e]
                over = np.maximum(cell.lo - x, x - cell.hi).max()
                if over > 0.25 * max(cell.h_max, 1e-300):
                    return True
        return False

    def _harvest_costs(self, stats: StepStats):
        for rank in self.ranks:
            sched = rank.scheduler
            if sched is None:
                continue
            task_seconds = 0.0
            for task in sched.tasks:
                if task.cost_measured is None:
                    continue
                task_seconds += task.cost_measured
                if task.kind in ("send", "recv"):
                    continue
                if task.kind == "sort" and \
                        self.owner_of[self.grid.cells[task.cells[0]].top_id] != rank.rank_id:
                    continue
                entry = self.cost_map.setdefault((task.kind, task.cells), [0.0, 0])
                entry[0] += task.cost_measured
                entry[1] += 1
            stats.rank_task_seconds.append(task_seconds)
            stats.rank_busy_ns.append(sum(sched.worker_busy_ns))

    def _repartition(self) -> int:
        if self.k == 1:
            return 0
        graph = self.current_graph()
        current = np.array([self.owner_of[cid] for cid in graph.node_ids])
        result, changed = repartition(graph, current, self.k)
        if not changed:
            return 0
        return self.apply_assignment(result.by_cell(graph))

    def current_graph(self) -> CellGraph:
        costs = np.array([self._seeded_cost(spec) for spec in self.blueprint.specs])
        return build_cell_graph(self.blueprint, self.grid, costs)

    # ------------------------------------------------------------------
    # inspection
    # ------------------------------------------------------------------

    def gather_state(self) -> ParticleSet:
        """Global particle set sorted by pid (driver-side snapshot view)."""
        union, _ = self._gather_union()
        order = np.argsort(union.pid, kind="stable")
        union.permute(order)
        return union

    def reach_limits(self) -> np.ndarray:
        """Per-particle smoothing-length caps, aligned with gather_state()."""
        union, _ = self._gather_union()
        limits = np.empty(len(union))
        for cid in self.grid.leaves:
            cell = self.grid.cells[cid]
            limits[cell.start:cell.end] = self.grid.reach(cid)
        return limits[np.argsort(union.pid, kind="stable")]

    def imbalance(self) -> float:
        graph = self.current_graph()
        assignment = np.array([self.owner_of[cid] for cid in graph.node_ids])
        _, imb = evaluate_partition(graph, assignment)
        return imb
