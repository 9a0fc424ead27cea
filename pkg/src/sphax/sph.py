"""SPH mathematics: cubic-spline kernel, density/force pair operations,
smoothing-length adaptation, leapfrog kick, and field interpolation.

Everything here is the scalar/reference-grade formulation operating on a
:class:`ParticleSet`.  The engine's hot loops live in the kernel backends
(``sphax.backend``) and implement the same maths over sorted cell windows;
the two are cross-checked in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Cubic spline (M4) with compact support radius exactly h, 3D normalization.
KERNEL_SIGMA = 8.0 / math.pi
# Weighted neighbour count n_neigh = NEIGH_VOL * h^3 * sum_j W(r_ij, h).
NEIGH_VOL = 4.0 * math.pi / 3.0


class SphaxError(Exception):
    """Base class for engine errors."""


class SmoothingError(SphaxError):
    """Smoothing-length iteration failed to converge for a particle."""

    def __init__(self, pid: int, h: float, n_neigh: float):
        self.pid = pid
        super().__init__(
            f"smoothing length of particle {pid} did not converge "
            f"(h={h:.6g}, weighted neighbours={n_neigh:.4g})"
        )


class PhaseOrderError(SphaxError):
    """A quantity was consumed before the phase that produces it ran."""


@dataclass
class SphConfig:
    """Physics knobs shared by the engine, the per-pair ops and the oracle."""

    gamma: float = 5.0 / 3.0
    eta_neigh: float = 48.0
    h_tolerance: float = 1e-4
    h_max_iter: int = 30
    cfl: float = 0.1
    dt: float | None = None  # None -> harness picks from the CFL estimate

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError("gamma must be > 1")
        if self.eta_neigh <= 0.0:
            raise ValueError("eta_neigh must be > 0")
        if not 0.0 < self.h_tolerance < 1.0:
            raise ValueError("h_tolerance must be in (0, 1)")


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------

def kernel_eval(r, h):
    """Cubic-spline kernel value and radial derivative at distance ``r``.

    Support radius is exactly ``h``: W(r, h) = 0 for r >= h, and the
    normalization is chosen so the kernel integrates to one over its
    support sphere (W(0, h) = 8 / (pi h^3)).

    Accepts scalars or broadcastable arrays; returns ``(W, dW_dr)``.
    """
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr <= 0.0):
        raise ValueError("smoothing length must be > 0")
    r_arr = np.asarray(r, dtype=float)
    q = r_arr / h_arr
    w, dw = _spline(q)
    inv_h3 = KERNEL_SIGMA / h_arr**3
    W = inv_h3 * w
    dW_dr = inv_h3 / h_arr * dw
    if np.isscalar(r) and np.isscalar(h):
        return float(W), float(dW_dr)
    return W, dW_dr


def kernel_dwdh(r, h):
    """d W(r, h) / d h at fixed r (zero outside the support, like W)."""
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr <= 0.0):
        raise ValueError("smoothing length must be > 0")
    q = np.asarray(r, dtype=float) / h_arr
    w, dw = _spline(q)
    out = -(KERNEL_SIGMA / h_arr**4) * (3.0 * w + q * dw)
    return float(out) if np.isscalar(r) and np.isscalar(h) else out


def _spline(q):
    """Dimensionless spline w(q) and w'(q); branch at q = 1/2, zero at q >= 1."""
    q = np.asarray(q, dtype=float)
    inner = q <= 0.5
    mid = (q > 0.5) & (q < 1.0)
    w = np.zeros_like(q)
    dw = np.zeros_like(q)
    qi = q[inner]
    w[inner] = 1.0 + qi * qi * (6.0 * qi - 6.0)
    dw[inner] = qi * (18.0 * qi - 12.0)
    qm = 1.0 - q[mid]
    w[mid] = 2.0 * qm * qm * qm
    dw[mid] = -6.0 * qm * qm
    return w, dw


# --------------------------------------------------------------------------
# particle storage
# --------------------------------------------------------------------------

_STATE_FIELDS = ("x", "v", "v_pred", "m", "u", "h")
_ACCUM_FIELDS = ("rho", "rho_dh", "wcount", "wcount_dh", "a", "u_dot", "omega", "P")


@dataclass
class ParticleSet:
    """Structure-of-arrays particle store.

    ``wcount``/``wcount_dh`` accumulate sum_j W(r_ij, h_i) and its
    h-derivative; the weighted neighbour count is derived from them
    (:meth:`n_neigh`).  Accumulators are zeroed per phase by the engine.
    """

    x: np.ndarray
    v: np.ndarray
    m: np.ndarray
    u: np.ndarray
    h: np.ndarray
    v_pred: np.ndarray = field(default=None)  # integer-time velocity estimate
    rho: np.ndarray = field(default=None)
    rho_dh: np.ndarray = field(default=None)
    wcount: np.ndarray = field(default=None)
    wcount_dh: np.ndarray = field(default=None)
    a: np.ndarray = field(default=None)
    u_dot: np.ndarray = field(default=None)
    omega: np.ndarray = field(default=None)
    P: np.ndarray = field(default=None)  # pressure cache, filled after density
    pid: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.m)
        self.x = np.ascontiguousarray(self.x, dtype=float).reshape(n, 3)
        self.v = np.ascontiguousarray(self.v, dtype=float).reshape(n, 3)
        if self.v_pred is None:
            self.v_pred = self.v.copy()
        else:
            self.v_pred = np.ascontiguousarray(self.v_pred, dtype=float).reshape(n, 3)
        for name in ("m", "u", "h"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))
        for name in _ACCUM_FIELDS:
            cur = getattr(self, name)
            if cur is None:
                shape = (n, 3) if name == "a" else (n,)
                setattr(self, name, np.zeros(shape))
            else:
                setattr(self, name, np.ascontiguousarray(cur, dtype=float))
        if self.pid is None:
            self.pid = np.arange(n, dtype=np.int64)
        else:
            self.pid = np.ascontiguousarray(self.pid, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.m)

    @classmethod
    def empty(cls, n: int) -> "ParticleSet":
        return cls(
            x=np.zeros((n, 3)), v=np.zeros((n, 3)),
            m=np.ones(n), u=np.ones(n), h=np.ones(n),
        )

    def n_neigh(self):
        """Weighted neighbour count (4pi/3) h^3 sum_j W(r_ij, h)."""
        return NEIGH_VOL * self.h**3 * self.wcount

    def pressure(self, gamma: float):
        return self.rho * self.u * (gamma - 1.0)

    def zero_density_accumulators(self):
        for name in ("rho", "rho_dh", "wcount", "wcount_dh"):
            getattr(self, name).fill(0.0)

    def zero_force_accumulators(self):
        self.a.fill(0.0)
        self.u_dot.fill(0.0)

    def permute(self, perm: np.ndarray) -> None:
        """Reorder particles in place (``perm`` maps new index -> old index)."""
        for name in _STATE_FIELDS + _ACCUM_FIELDS + ("pid",):
            arr = getattr(self, name)
            setattr(self, name, np.ascontiguousarray(arr[perm]))

    def select(self, idx) -> "ParticleSet":
        kw = {name: getattr(self, name)[idx].copy()
              for name in _STATE_FIELDS + _ACCUM_FIELDS + ("pid",)}
        return ParticleSet(**kw)

    def append(self, other: "ParticleSet") -> None:
        for name in _STATE_FIELDS + _ACCUM_FIELDS + ("pid",):
            merged = np.concatenate([getattr(self, name), getattr(other, name)])
            setattr(self, name, np.ascontiguousarray(merged))

    def copy(self) -> "ParticleSet":
        return self.select(slice(None))

    def total_momentum(self) -> np.ndarray:
        return (self.m[:, None] * self.v).sum(axis=0)

    def total_energy(self) -> float:
        return float(np.sum(self.m * (self.u + 0.5 * np.einsum("ij,ij->i", self.v, self.v))))

    def sound_speed(self, gamma: float):
        return np.sqrt(gamma * (gamma - 1.0) * self.u)


def periodic_delta(d, box):
    """Minimum-image displacement for (possibly batched) raw deltas ``d``."""
    if box is None:
        return d
    return d - box * np.round(d / box)


# --------------------------------------------------------------------------
# per-pair operations
# --------------------------------------------------------------------------

def self_contribution(ps: ParticleSet, i: int) -> None:
    """Add the r = 0 self term to particle i's density accumulators."""
    h = ps.h[i]
    w0 = KERNEL_SIGMA / h**3
    ps.rho[i] += ps.m[i] * w0
    ps.rho_dh[i] += ps.m[i] * (-3.0 * KERNEL_SIGMA / h**4)
    ps.wcount[i] += w0
    ps.wcount_dh[i] += -3.0 * KERNEL_SIGMA / h**4


def density_accumulate(ps: ParticleSet, i: int, j: int, box=None) -> None:
    """Gather particle j's contribution into particle i's density accumulators.

    Pre: r_ij < h_i (contributions at r >= h_i are exact zeros anyway).
    """
    d = periodic_delta(ps.x[i] - ps.x[j], box)
    r = float(np.sqrt(d @ d))
    w, _ = kernel_eval(r, ps.h[i])
    dwdh = kernel_dwdh(r, ps.h[i])
    ps.rho[i] += ps.m[j] * w
    ps.rho_dh[i] += ps.m[j] * dwdh
    ps.wcount[i] += w
    ps.wcount_dh[i] += dwdh


def force_accumulate(ps: ParticleSet, i: int, j: int, box=None, gamma: float = 5.0 / 3.0) -> None:
    """Apply one unordered pair's force and energy-rate updates to both particles.

    Pre: r_ij < max(h_i, h_j); the density phase (rho, omega) is complete.
    The shared direction/bracket construction makes the pair's momentum
    contribution cancel (bitwise for equal masses).
    """
    for k in (i, j):
        if not np.isfinite(ps.rho[k]) or ps.rho[k] <= 0.0 \
                or not np.isfinite(ps.omega[k]) or ps.omega[k] == 0.0:
            raise PhaseOrderError(
                f"force before density: particle {int(ps.pid[k])} has "
                f"rho={ps.rho[k]!r}, omega={ps.omega[k]!r}")
    d = periodic_delta(ps.x[i] - ps.x[j], box)
    r = float(np.sqrt(d @ d))
    if r <= 0.0:
        return
    rhat = d / r
    _, dw_i = kernel_eval(r, ps.h[i])
    _, dw_j = kernel_eval(r, ps.h[j])
    p_i = ps.rho[i] * ps.u[i] * (gamma - 1.0)
    p_j = ps.rho[j] * ps.u[j] * (gamma - 1.0)
    term_i = p_i / (ps.omega[i] * ps.rho[i] ** 2)
    term_j = p_j / (ps.omega[j] * ps.rho[j] ** 2)
    bracket = term_i * dw_i + term_j * dw_j
    f = bracket * rhat
    ps.a[i] -= ps.m[j] * f
    ps.a[j] += ps.m[i] * f
    dv_r = float((ps.v[i] - ps.v[j]) @ rhat)
    ps.u_dot[i] += term_i * ps.m[j] * dv_r * dw_i
    ps.u_dot[j] += term_j * ps.m[i] * dv_r * dw_j


# --------------------------------------------------------------------------
# smoothing-length adaptation
# --------------------------------------------------------------------------

def gather_density(x_i, h: float, src_x, src_m, box=None):
    """Brute-force density gather at trial h: (rho, rho_dh, wcount, wcount_dh).

    ``src`` must include the particle itself (the r = 0 self term).
    """
    d = periodic_delta(x_i[None, :] - src_x, box)
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    mask = r < h
    w, _ = kernel_eval(r[mask], h)
    dwdh = kernel_dwdh(r[mask], h)
    msel = src_m[mask]
    return (
        float(np.sum(msel * w)),
        float(np.sum(msel * dwdh)),
        float(np.sum(w)),
        float(np.sum(dwdh)),
    )


FOUR_PI = 4.0 * math.pi


def newton_h_step(h: float, wcount: float, wcount_dh: float, eta: float):
    """One Newton proposal for f(h) = n_neigh(h) - eta; returns (f, dh).

    dh is NaN when the derivative is unusable (caller falls back to
    bisection).  Expression shapes mirror the compiled backend so both
    walk bit-identical trajectories.
    """
    nn = NEIGH_VOL * (h * h * h) * wcount
    f = nn - eta
    fp = FOUR_PI * (h * h) * wcount + NEIGH_VOL * (h * h * h) * wcount_dh
    dh = -f / fp if fp > 0.0 else math.nan
    return f, dh


def adapt_smoothing(ps: ParticleSet, i: int, src_x, src_m, cfg: SphConfig,
                    box=None, h_limit: float = math.inf):
    """Converge particle i's smoothing length to the neighbour-count target.

    Newton-Raphson on f(h) = n_neigh(h) - eta_neigh with each rejected
    proposal triggering a density re-gather (the per-particle "redo").
    Falls back to bracketed bisection when Newton stalls; raises
    :class:`SmoothingError` if that fails too.  Accumulators are left
    consistent with the accepted h.  Returns the iteration count.

    ``h_limit`` caps growth (the engine passes the cell's reach cap); a
    particle still hungry at a finite cap is reported via the
    ``"capped"`` return of :func:`adapt_smoothing_capped` used by the
    engine paths — here the public API raises instead when the absolute
    limit cannot satisfy the target.
    """
    iters, capped = _adapt(ps, i, src_x, src_m, cfg, box, h_limit)
    if capped:
        raise SmoothingError(int(ps.pid[i]), float(ps.h[i]), float(ps.n_neigh()[i]))
    return iters


def newton_smoothing(pid: int, h: float, state, gather, eta: float, tol: float,
                     max_iter: int, h_limit: float):
    """Newton/bisection driver shared by the API path and the NumPy backend.

    ``state`` is (rho, rho_dh, wcount, wcount_dh) at the entry h; ``gather(h)``
    recomputes that tuple at a trial h (the per-particle density redo).
    Returns (h, state, iterations, capped).  The compiled backend mirrors
    this control flow exactly so engine and oracle walk identical
    trajectories.
    """
    rho, rho_dh, wc, wc_dh = state
    h_lo, h_hi = 0.0, math.inf
    iters = 0
    converged = False
    capped = False

    for _ in range(max_iter):
        f, dh = newton_h_step(h, wc, wc_dh, eta)
        if f < 0.0:
            h_lo = max(h_lo, h)
        else:
            h_hi = min(h_hi, h)
        if math.isfinite(dh) and abs(dh) <= tol * h:
            converged = True
            break
        h_new = h + dh if math.isfinite(dh) else math.inf
        h_new = min(max(h_new, 0.5 * h), 2.0 * h)
        if math.isfinite(h_hi) and not h_lo < h_new < h_hi:
            h_new = 0.5 * (h_lo + h_hi)
        if h_new >= h_limit:
            # Any cap contact is reported: the trajectory is now shaped by
            # the grid's reach limit, so the caller must plan a rebuild.
            capped = True
            if h >= h_limit:
                break
            h_new = h_limit
        h = h_new
        rho, rho_dh, wc, wc_dh = gather(h)
        iters += 1

    if not converged and not capped:
        # Bisection recovery: establish a bracket, then halve.
        while not math.isfinite(h_hi):
            if h >= h_limit:
                capped = True
                break
            h = min(2.0 * h, h_limit)
            rho, rho_dh, wc, wc_dh = gather(h)
            iters += 1
            f, _ = newton_h_step(h, wc, wc_dh, eta)
            if f < 0.0:
                h_lo = max(h_lo, h)
            else:
                h_hi = h
        if not capped:
            for _ in range(max_iter):
                if h_hi - h_lo <= tol * h:
                    converged = True
                    break
                h = 0.5 * (h_lo + h_hi)
                rho, rho_dh, wc, wc_dh = gather(h)
                iters += 1
                f, _ = newton_h_step(h, wc, wc_dh, eta)
                if f < 0.0:
                    h_lo = h
                else:
                    h_hi = h
            if not converged:
                raise SmoothingError(pid, h, NEIGH_VOL * h**3 * wc)

    return h, (rho, rho_dh, wc, wc_dh), iters, capped


def _adapt(ps: ParticleSet, i: int, src_x, src_m, cfg: SphConfig, box, h_limit):
    state = (float(ps.rho[i]), float(ps.rho_dh[i]),
             float(ps.wcount[i]), float(ps.wcount_dh[i]))

    def gather(h):
        return gather_density(ps.x[i], h, src_x, src_m, box)

    h, state, iters, capped = newton_smoothing(
        int(ps.pid[i]), float(ps.h[i]), state, gather,
        cfg.eta_neigh, cfg.h_tolerance, cfg.h_max_iter, h_limit)
    ps.h[i] = h
    ps.rho[i], ps.rho_dh[i], ps.wcount[i], ps.wcount_dh[i] = state
    ps.omega[i] = 1.0 + (h / (3.0 * ps.rho[i])) * ps.rho_dh[i]
    ps.P[i] = ps.rho[i] * ps.u[i] * (cfg.gamma - 1.0)
    return iters, capped


# --------------------------------------------------------------------------
# integration and interpolation
# --------------------------------------------------------------------------

def kick(ps: ParticleSet, dt: float, box=None, u_floor: float = 0.0, sl=slice(None)) -> None:
    """Kick-drift-kick update of v, x, u for the given slice.

    v += a dt/2, x += v dt (wrapped into [0, L)), v += a dt/2,
    u += u_dot dt clamped to stay positive.  Also refreshes the predicted
    integer-time velocity used by the next step's rate terms.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    half = 0.5 * dt
    ps.v[sl] += ps.a[sl] * half
    ps.x[sl] += ps.v[sl] * dt
    if box is not None:
        ps.x[sl] = wrap_positions(np.mod(ps.x[sl], box), box)
    ps.v[sl] += ps.a[sl] * half
    ps.u[sl] = np.maximum(ps.u[sl] + ps.u_dot[sl] * dt, u_floor)
    ps.v_pred[sl] = ps.v[sl] + ps.a[sl] * half


def wrap_positions(x, box):
    """Map positions into [0, box) (guarding the x == box rounding case)."""
    wrapped = np.mod(x, box)
    return np.where(wrapped >= box, 0.0, wrapped)


def cfl_timestep(ps: ParticleSet, cfg: SphConfig) -> float:
    """cfl * min(h / c_s) over particles, c_s = sqrt(gamma (gamma-1) u)."""
    cs = ps.sound_speed(cfg.gamma)
    return float(cfg.cfl * np.min(ps.h / cs))


def interpolate_quantity(point, values, ps: ParticleSet, h: float, box=None) -> float:
    """Kernel-weighted field estimate sum_i m_i (Q_i / rho_i) W(|r - r_i|, h).

    Requires densities for all in-range particles (the density phase must
    have run); an empty in-range set yields 0.
    """
    point = np.asarray(point, dtype=float)
    values = np.asarray(values, dtype=float)
    d = periodic_delta(point[None, :] - ps.x, box)
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    mask = r < h
    if not np.any(mask):
        return 0.0
    rho = ps.rho[mask]
    if np.any(rho <= 0.0):
        raise PhaseOrderError("interpolation over particles with rho = 0 "
                              "(density phase has not run)")
    w, _ = kernel_eval(r[mask], h)
    return float(np.sum(ps.m[mask] * (values[mask] / rho) * w))
