"""Simulated multi-rank machinery: wire format, non-blocking transports,
proxy cells, communication planning, and the transport pump.

Ranks are isolated state domains; the only inter-rank channel for particle
field data is the Transport contract (send is non-blocking, poll returns
whatever has been delivered, ordering between distinct messages is not
guaranteed, delivery within a step is).  Each cut cell sends one message
per (phase, destination) per step: positions/velocities before the density
phase, density results (rho, omega, h, pressure) before the force phase.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .sph import SphaxError

MAGIC = b"SWXM"
VERSION = 1
_HEADER = struct.Struct("<4sHIBQII")  # magic, version, step, phase, cell, count, nbytes

PHASE_DENSITY = 0
PHASE_FORCE = 1
PHASE_NAMES = {PHASE_DENSITY: "density", PHASE_FORCE: "force"}

# Payload field order is part of the wire contract.
DENSITY_FIELDS = ("x", "y", "z", "vx", "vy", "vz", "m", "h", "u")
FORCE_FIELDS = ("rho", "omega", "h", "pressure")

_MIGRATION_DTYPE = np.dtype([
    ("x", "<f8", (3,)), ("v", "<f8", (3,)), ("v_pred", "<f8", (3,)),
    ("m", "<f8"), ("u", "<f8"), ("h", "<f8"), ("pid", "<i8"),
])


class ProtocolError(SphaxError):
    pass


class TransportError(SphaxError):
    pass


@dataclass
class Message:
    step: int
    phase: int
    cell: int
    payload: np.ndarray   # (count, nfields) float64, field order per phase

    @property
    def count(self) -> int:
        return self.payload.shape[0]

    def fields(self) -> tuple:
        return DENSITY_FIELDS if self.phase == PHASE_DENSITY else FORCE_FIELDS


def encode_message(msg: Message) -> bytes:
    payload = np.ascontiguousarray(msg.payload, dtype="<f8")
    nfields = len(msg.fields())
    if payload.ndim != 2 or payload.shape[1] != nfields:
        raise ProtocolError(
            f"phase {msg.phase} payload must have {nfields} columns")
    body = payload.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, msg.step, msg.phase, msg.cell,
                          payload.shape[0], len(body))
    return header + body


def decode_message(data: bytes) -> Message:
    if len(data) < _HEADER.size:
        raise ProtocolError(f"short message ({len(data)} bytes)")
    magic, version, step, phase, cell, count, nbytes = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if phase not in PHASE_NAMES:
        raise ProtocolError(f"unknown phase {phase}")
    nfields = len(DENSITY_FIELDS) if phase == PHASE_DENSITY else len(FORCE_FIELDS)
    if nbytes != count * nfields * 8 or len(data) != _HEADER.size + nbytes:
        raise ProtocolError(
            f"payload size mismatch: header says {nbytes} bytes for "
            f"{count} particles, got {len(data) - _HEADER.size}")
    payload = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return Message(step, phase, cell, payload.reshape(count, nfields).copy())


def pack_migration(pset, idx) -> bytes:
    rec = np.empty(len(idx), dtype=_MIGRATION_DTYPE)
    rec["x"] = pset.x[idx]
    rec["v"] = pset.v[idx]
    rec["v_pred"] = pset.v_pred[idx]
    rec["m"] = pset.m[idx]
    rec["u"] = pset.u[idx]
    rec["h"] = pset.h[idx]
    rec["pid"] = pset.pid[idx]
    return rec.tobytes()


def unpack_migration(data: bytes):
    from .sph import ParticleSet
    rec = np.frombuffer(data, dtype=_MIGRATION_DTYPE)
    return ParticleSet(x=rec["x"].copy(), v=rec["v"].copy(),
                       v_pred=rec["v_pred"].copy(), m=rec["m"].copy(),
                       u=rec["u"].copy(), h=rec["h"].copy(), pid=rec["pid"].copy())


# --------------------------------------------------------------------------
# transports
# --------------------------------------------------------------------------

class TransportNetwork:
    """In-process bus with one endpoint per rank; immediate delivery."""

    def __init__(self, ranks: int):
        self.ranks = ranks
        self._lock = threading.Lock()
        self._queues = [[] for _ in range(ranks)]
        self.sent_count = 0
        self.sent_bytes = 0

    def endpoint(self, rank: int) -> "Endpoint":
        return Endpoint(self, rank)

    def _send(self, src: int, dest: int, data: bytes) -> None:
        if not 0 <= dest < self.ranks:
            raise TransportError(f"destination rank {dest} does not exist")
        with self._lock:
            self.sent_count += 1
            self.sent_bytes += len(data)
            self._deliver(src, dest, data)

    def _deliver(self, src: int, dest: int, data: bytes) -> None:
        self._queues[dest].append(data)

    def _poll(self, rank: int):
        with self._lock:
            out = self._ready(rank)
        return out

    def _ready(self, rank: int):
        out = self._queues[rank]
        self._queues[rank] = []
        return out

    def idle(self) -> bool:
        with self._lock:
            return all(not q for q in self._queues)

    def reset_stats(self):
        with self._lock:
            count, nbytes = self.sent_count, self.sent_bytes
            self.sent_count = 0
            self.sent_bytes = 0
        return count, nbytes


class DelayReorderNetwork(TransportNetwork):
    """Transport with per-message latency and randomized delivery order.

    Exercises the contract's weakest guarantees: arbitrary reordering and
    delayed (but certain) delivery.
    """

    def __init__(self, ranks: int, latency: float = 0.0, jitter: float = 0.0,
                 reorder: bool = True, seed: int = 0):
        super().__init__(ranks)
        import time
        self._clock = time.monotonic
        self.latency = latency
        self.jitter = jitter
        self.reorder = reorder
        self._rng = np.random.default_rng(seed)

    def _deliver(self, src: int, dest: int, data: bytes) -> None:
        lat = self.latency
        if self.jitter > 0.0:
            lat += float(self._rng.uniform(0.0, self.jitter))
        self._queues[dest].append((self._clock() + lat, data))

    def _ready(self, rank: int):
        now = self._clock()
        due = [item for item in self._queues[rank] if item[0] <= now]
        if not due:
            return []
        self._queues[rank] = [item for item in self._queues[rank] if item[0] > now]
        if self.reorder and len(due) > 1:
            self._rng.shuffle(due)
        return [data for _, data in due]


class DuplicatingNetwork(TransportNetwork):
    """Faulty transport for tests: delivers every message twice."""

    def _deliver(self, src: int, dest: int, data: bytes) -> None:
        self._queues[dest].append(data)
        self._queues[dest].append(data)


class Endpoint:
    """A rank's handle on the network: non-blocking send + poll."""

    def __init__(self, network: TransportNetwork, rank: int):
        self.network = network
        self.rank = rank

    def send(self, dest: int, data: bytes) -> None:
        self.network._send(self.rank, dest, data)

    def poll(self):
        return self.network._poll(self.rank)

    def queued(self) -> int:
        """Messages addressed here still inside the transport (due or not)."""
        with self.network._lock:
            return len(self.network._queues[self.rank])


# --------------------------------------------------------------------------
# proxy cells and the pump
# --------------------------------------------------------------------------

@dataclass
class ProxyCell:
    """Read-only local mirror of a remote cell, filled by recv messages.

    Carries zero accumulator arrays purely so kernel signatures stay
    uniform; pair kernels never write the un-owned side.
    """

    cid: int
    src_rank: int
    n: int

    def __post_init__(self):
        self.x = np.zeros((self.n, 3))
        self.v = np.zeros((self.n, 3))
        self.a = np.zeros((self.n, 3))
        for name in ("m", "h", "u", "rho", "omega", "P",
                     "rho_dh", "wcount", "wcount_dh", "u_dot"):
            setattr(self, name, np.zeros(self.n))

    def apply(self, msg: Message) -> None:
        pl = msg.payload
        if msg.phase == PHASE_DENSITY:
            self.x[:] = pl[:, 0:3]
            self.v[:] = pl[:, 3:6]
            self.m[:] = pl[:, 6]
            self.h[:] = pl[:, 7]
            self.u[:] = pl[:, 8]
        else:
            self.rho[:] = pl[:, 0]
            self.omega[:] = pl[:, 1]
            self.h[:] = pl[:, 2]
            self.P[:] = pl[:, 3]


@dataclass
class CommPlan:
    """Per-rank send/recv lists derived from blueprint + assignment."""

    sends: dict = field(default_factory=dict)   # rank -> [(cell, dest, phase)]
    recvs: dict = field(default_factory=dict)   # rank -> [(cell, src, phase)]

    def count(self, rank: int) -> tuple:
        return len(self.sends.get(rank, [])), len(self.recvs.get(rank, []))


def plan_communications(blueprint, grid, owner_of) -> CommPlan:
    """One send/recv per (cut cell, consumer rank, phase).

    ``owner_of``: mapping top-level cell id -> rank.  Every cut pair task
    executes on both owners; each side needs the other cell's particles in
    the density phase and its density results in the force phase.
    """
    needs: set = set()   # (consumer_rank, cell, phase)
    for (kind, a, b), _ in blueprint.pair_ids.items():
        if kind != "density_pair":
            continue
        ra = owner_of[grid.cells[a].top_id]
        rb = owner_of[grid.cells[b].top_id]
        if ra == rb:
            continue
        for phase in (PHASE_DENSITY, PHASE_FORCE):
            needs.add((ra, b, phase))
            needs.add((rb, a, phase))
    plan = CommPlan()
    for consumer, cell, phase in sorted(needs):
        owner = owner_of[grid.cells[cell].top_id]
        plan.sends.setdefault(owner, []).append((cell, consumer, phase))
        plan.recvs.setdefault(consumer, []).append((cell, owner, phase))
    for lst in plan.sends.values():
        lst.sort()
    for lst in plan.recvs.values():
        lst.sort()
    return plan


class MessagePump:
    """Applies delivered messages to proxy cells and completes recv tasks.

    Invoked by idle workers between task acquisitions; message application
    holds the proxy cell's resource lock.
    """

    def __init__(self, rank: int, endpoint: Endpoint, scheduler, proxies: dict,
                 step: int, recv_tids: dict, on_apply=None):
        self.rank = rank
        self.endpoint = endpoint
        self.scheduler = scheduler
        self.proxies = proxies
        self.step = step
        self.recv_tids = dict(recv_tids)   # (cell, phase) -> task id
        self.applied: set = set()
        self.pending: list = []
        self.on_apply = on_apply

    def __call__(self) -> bool:
        progressed = False
        messages = self.pending
        self.pending = []
        messages.extend(self.endpoint.poll())
        for data in messages:
            if isinstance(data, Message):
                msg = data
            else:
                msg = decode_message(data)
            key = (msg.cell, msg.phase)
            if key in self.applied:
                raise ProtocolError(
                    f"duplicate message on rank {self.rank}: step={msg.step} "
                    f"phase={PHASE_NAMES[msg.phase]} cell={msg.cell} "
                    f"count={msg.count}")
            if msg.step != self.step or key not in self.recv_tids:
                raise ProtocolError(
                    f"unexpected message on rank {self.rank}: step={msg.step} "
                    f"(current {self.step}) phase={PHASE_NAMES[msg.phase]} "
                    f"cell={msg.cell} count={msg.count}")
            proxy = self.proxies[msg.cell]
            if msg.count != proxy.n:
                raise ProtocolError(
                    f"message for cell {msg.cell} carries {msg.count} particles, "
                    f"proxy expects {proxy.n}")
            if not self.scheduler.try_lock((msg.cell,)):
                self.pending.append(msg)
                continue
            try:
                proxy.apply(msg)
            finally:
                self.scheduler.unlock((msg.cell,))
            self.applied.add(key)
            if self.on_apply is not None:
                self.on_apply(msg)
            self.scheduler.complete_external(self.recv_tids[key])
            progressed = True
        return progressed

    def outstanding(self) -> int:
        return len(self.recv_tids) - len(self.applied)
