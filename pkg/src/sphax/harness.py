"""Run configuration, initial conditions, the timed step loop, and reports.

The timing protocol: run ``steps`` steps (>= 3), report per-step wall
clock, and average over the interior steps only (first and last excluded).
Repartitioning fires on its configured cadence and is excluded from the
per-step wall times (it happens between steps).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .engine import Engine
from .exchange import DelayReorderNetwork, TransportNetwork
from .sph import NEIGH_VOL, ParticleSet, SphaxError, SphConfig, wrap_positions


class ConfigError(SphaxError):
    pass


@dataclass
class RunConfig:
    n: int = 1000
    box: float = 1.0
    ic: str = "uniform"             # uniform | clustered
    clumps: int = 8
    clump_radius: float = 0.05
    clump_fraction: float = 0.75
    steps: int = 100
    repart_period: int = 100
    ranks: int = 1
    workers: int = 1
    seed: int = 0
    dt: float | None = None         # None -> CFL estimate at t = 0
    gamma: float = 5.0 / 3.0
    eta_neigh: float = 48.0
    h_tolerance: float = 1e-4
    h_max_iter: int = 30
    cfl: float = 0.1
    split_threshold: int = 100
    reach_slack: float = 1.5
    min_cell_occupancy: float = 0.0
    transport: str = "instant"      # instant | delay
    latency: float = 0.0
    jitter: float = 0.0
    reorder: bool = True
    barriered: bool = False
    out_dir: str | None = None
    trace: bool = False
    snapshot_mode: str = "binary"   # binary | text

    def __post_init__(self):
        if self.n <= 0:
            raise ConfigError("particle count must be positive")
        if self.box <= 0:
            raise ConfigError("box edge must be positive")
        if self.ic not in ("uniform", "clustered"):
            raise ConfigError(f"unknown IC mode {self.ic!r}")
        if self.ic == "clustered" and self.clump_radius >= self.box / 2:
            raise ConfigError("clump radius must be below half the box edge")
        if self.ic == "clustered" and not 0.0 < self.clump_fraction <= 1.0:
            raise ConfigError("clump fraction must be in (0, 1]")
        if self.steps < 3:
            raise ConfigError("need at least 3 steps (timing drops first and last)")
        if self.ranks < 1 or self.workers < 1:
            raise ConfigError("ranks and workers must be >= 1")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.transport not in ("instant", "delay"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.snapshot_mode not in ("binary", "text"):
            raise ConfigError(f"unknown snapshot mode {self.snapshot_mode!r}")

    def sph_config(self) -> SphConfig:
        return SphConfig(gamma=self.gamma, eta_neigh=self.eta_neigh,
                         h_tolerance=self.h_tolerance,
                         h_max_iter=self.h_max_iter, cfl=self.cfl, dt=self.dt)


# --------------------------------------------------------------------------
# initial conditions
# --------------------------------------------------------------------------

def generate_ics(config: RunConfig) -> ParticleSet:
    """Deterministic particle set from the seed (unit total mass, unit u)."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    L = config.box
    if config.ic == "uniform":
        side = int(math.ceil(n ** (1.0 / 3.0)))
        idx = np.arange(n)
        lattice = np.column_stack([idx // (side * side),
                                   (idx // side) % side,
                                   idx % side]).astype(float)
        spacing = L / side
        x = (lattice + 0.5) * spacing
        x += rng.uniform(-0.05, 0.05, size=(n, 3)) * spacing
        x = wrap_positions(x, L)
        v = np.zeros((n, 3))
        h0 = np.full(n, _h_for_number_density(config.eta_neigh, n / L**3))
    else:
        n_clump = int(round(config.clump_fraction * n))
        n_bg = n - n_clump
        centres = rng.uniform(0.0, L, size=(config.clumps, 3))
        member = rng.integers(0, config.clumps, size=n_clump)
        blob = rng.normal(0.0, config.clump_radius, size=(n_clump, 3))
        x = np.concatenate([wrap_positions(centres[member] + blob, L),
                            rng.uniform(0.0, L, size=(n_bg, 3))])
        cs0 = math.sqrt(config.gamma * (config.gamma - 1.0))
        v = rng.normal(0.0, 0.02 * cs0, size=(n, 3))
        h0 = _local_h_seed(x, L, config.eta_neigh)
    m = np.full(n, 1.0 / n)
    u = np.ones(n)
    return ParticleSet(x=x, v=v, m=m, u=u, h=h0, pid=np.arange(n, dtype=np.int64))


def _h_for_number_density(eta: float, number_density: float) -> float:
    return (eta / (NEIGH_VOL * number_density)) ** (1.0 / 3.0)


def _local_h_seed(x, L: float, eta: float) -> np.ndarray:
    """Per-particle h from a coarse occupancy census of a helper grid.

    The census is smoothed over each bin's 27-neighbourhood (periodic) so
    stray particles next to dense regions seed near their converged h.
    """
    n = len(x)
    nb = min(32, max(4, int(round(n ** (1.0 / 3.0) / 2.0))))
    bins = np.minimum((x / (L / nb)).astype(int), nb - 1)
    lin = (bins[:, 0] * nb + bins[:, 1]) * nb + bins[:, 2]
    counts = np.bincount(lin, minlength=nb**3).reshape(nb, nb, nb)
    smooth = np.zeros_like(counts)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                smooth += np.roll(counts, (dx, dy, dz), axis=(0, 1, 2))
    local_density = smooth.reshape(-1)[lin] / (27.0 * (L / nb) ** 3)
    h = _h_for_number_density(eta, local_density)
    return np.minimum(h, L / 3.5)


# --------------------------------------------------------------------------
# the run loop
# --------------------------------------------------------------------------

@dataclass
class TimingReport:
    wall_ms: list                     # per-step wall clock
    messages: list                    # per-step message counts
    message_bytes: list               # per-step message bytes
    rank_task_seconds: list           # per-rank task-time totals over the run
    imbalance: float
    repartition_steps: list
    migrated: int

    @property
    def mean_ms(self) -> float:
        """Mean wall time excluding the first and last steps."""
        interior = self.wall_ms[1:-1]
        return float(np.mean(interior))


@dataclass
class SimulationResult:
    config: RunConfig
    report: TimingReport
    final: ParticleSet
    engine: Engine
    trace_rows: list = field(default_factory=list)


def build_engine(config: RunConfig, pset: ParticleSet | None = None) -> Engine:
    if pset is None:
        pset = generate_ics(config)
    if config.transport == "delay":
        network = DelayReorderNetwork(config.ranks, latency=config.latency,
                                      jitter=config.jitter,
                                      reorder=config.reorder, seed=config.seed)
    else:
        network = TransportNetwork(config.ranks)
    box = np.full(3, float(config.box))
    return Engine(pset, box, config.sph_config(), ranks=config.ranks,
                  workers=config.workers, split_threshold=config.split_threshold,
                  reach_slack=config.reach_slack,
                  min_cell_occupancy=config.min_cell_occupancy,
                  repart_period=config.repart_period, network=network,
                  barriered=config.barriered)


def run_simulation(config: RunConfig) -> SimulationResult:
    engine = build_engine(config)
    trace_rows: list = []
    for _ in range(config.steps):
        engine.step()
        if config.trace:
            for rank in engine.ranks:
                if rank.scheduler is not None:
                    trace_rows.extend(rank.scheduler.trace_rows())
    stats = engine.stats_history
    nranks = config.ranks
    task_totals = [0.0] * nranks
    for st in stats:
        for r, sec in enumerate(st.rank_task_seconds):
            task_totals[r] += sec
    report = TimingReport(
        wall_ms=[st.wall_ns / 1e6 for st in stats],
        messages=[st.messages for st in stats],
        message_bytes=[st.message_bytes for st in stats],
        rank_task_seconds=task_totals,
        imbalance=engine.imbalance(),
        repartition_steps=list(engine.repartition_steps),
        migrated=sum(st.migrated for st in stats),
    )
    result = SimulationResult(config, report, engine.gather_state(), engine,
                              trace_rows)
    if config.out_dir:
        emit_reports(result, config.out_dir)
    return result


# --------------------------------------------------------------------------
# reports and snapshots
# --------------------------------------------------------------------------

TIMING_HEADER = ["step", "wall_ms", "messages", "bytes"]
PARTITION_HEADER = ["cell", "rank", "node_weight"]
SCALING_HEADER = ["workers", "wall_ms_mean", "speedup", "efficiency"]
TRACE_HEADER = ["id", "kind", "rank", "worker", "start_ns", "end_ns",
                "cost_estimate"]


def emit_reports(result: SimulationResult, out_dir: str,
                 baseline: "SimulationResult | None" = None) -> dict:
    """Write timing/partition/trace CSVs plus the snapshot; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    timing = os.path.join(out_dir, "timing.csv")
    with open(timing, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_HEADER)
        for i, ms in enumerate(result.report.wall_ms, start=1):
            w.writerow([i, f"{ms:.6f}", result.report.messages[i - 1],
                        result.report.message_bytes[i - 1]])
    paths["timing"] = timing

    part = os.path.join(out_dir, "partition.csv")
    graph = result.engine.current_graph()
    with open(part, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARTITION_HEADER)
        for i, cid in enumerate(graph.node_ids):
            w.writerow([cid, result.engine.owner_of[cid],
                        f"{graph.node_w[i]:.9g}"])
        fh.write(f"# imbalance,{result.report.imbalance:.9g}\n")
    paths["partition"] = part

    scaling = os.path.join(out_dir, "scaling.csv")
    with open(scaling, "w", newline="") as fh:
        w = csv.writer(fh)
        if baseline is None:
            w.writerow(SCALING_HEADER[:2])
            w.writerow([result.config.workers, f"{result.report.mean_ms:.6f}"])
        else:
            w.writerow(SCALING_HEADER)
            speedup = baseline.report.mean_ms / result.report.mean_ms
            eff = speedup / result.config.workers
            w.writerow([baseline.config.workers,
                        f"{baseline.report.mean_ms:.6f}", 1.0, ""])
            w.writerow([result.config.workers, f"{result.report.mean_ms:.6f}",
                        f"{speedup:.6f}", f"{eff:.6f}"])
    paths["scaling"] = scaling

    if result.trace_rows:
        trace = os.path.join(out_dir, "trace.csv")
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            w.writerows(result.trace_rows)
        paths["trace"] = trace

    ext = "txt" if result.config.snapshot_mode == "text" else "dat"
    snap = os.path.join(out_dir, f"snapshot.{ext}")
    write_snapshot(snap, result.final, result.config.box, result.config.gamma,
                   result.config.steps, result.engine.dt,
                   mode=result.config.snapshot_mode)
    paths["snapshot"] = snap
    return paths


_SNAP_DTYPE = np.dtype([("pid", "<i8"), ("x", "<f8", (3,)), ("v", "<f8", (3,)),
                        ("m", "<f8"), ("u", "<f8"), ("h", "<f8"),
                        ("rho", "<f8")])


def write_snapshot(path: str, ps: ParticleSet, box: float, gamma: float,
                   step: int, dt: float, mode: str = "binary") -> None:
    """Self-describing header + little-endian records (or text rows)."""
    order = np.argsort(ps.pid, kind="stable")
    header = (f"SPHAXSNAP 1 {mode}\n"
              f"n {len(ps)}\n"
              f"box {box!r}\n"
              f"gamma {gamma!r}\n"
              f"step {step}\n"
              f"dt {dt!r}\n"
              "END\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if mode == "binary":
            rec = np.empty(len(ps), dtype=_SNAP_DTYPE)
            rec["pid"] = ps.pid[order]
            rec["x"] = ps.x[order]
            rec["v"] = ps.v[order]
            rec["m"] = ps.m[order]
            rec["u"] = ps.u[order]
            rec["h"] = ps.h[order]
            rec["rho"] = ps.rho[order]
            fh.write(rec.tobytes())
        else:
            for i in order:
                vals = [repr(float(val)) for val in (
                    *ps.x[i], *ps.v[i], ps.m[i], ps.u[i], ps.h[i], ps.rho[i])]
                fh.write((" ".join([str(int(ps.pid[i]))] + vals) + "\n")
                         .encode("ascii"))


def read_snapshot(path: str):
    """Inverse of :func:`write_snapshot`; returns (ParticleSet, meta dict)."""
    with open(path, "rb") as fh:
        meta = {}
        first = fh.readline().decode("ascii").split()
        if first[:2] != ["SPHAXSNAP", "1"]:
            raise SphaxError(f"not a snapshot file: {path}")
        mode = first[2]
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "END":
                break
            key, val = line.split(maxsplit=1)
            meta[key] = val
        n = int(meta["n"])
        if mode == "binary":
            rec = np.frombuffer(fh.read(), dtype=_SNAP_DTYPE, count=n)
            ps = ParticleSet(x=rec["x"].copy(), v=rec["v"].copy(),
                             m=rec["m"].copy(), u=rec["u"].copy(),
                             h=rec["h"].copy(), rho=rec["rho"].copy(),
                             pid=rec["pid"].copy())
        else:
            raw = np.loadtxt(fh, ndmin=2)
            ps = ParticleSet(x=raw[:, 1:4], v=raw[:, 4:7], m=raw[:, 7],
                             u=raw[:, 8], h=raw[:, 9], rho=raw[:, 10],
                             pid=raw[:, 0].astype(np.int64))
    meta["mode"] = mode
    return ps, meta
