"""All-pairs O(N^2) reference for density, smoothing-length adaptation and
forces.  Used as the independent oracle in tests: no cells, no sorting, no
scheduler; kernel formulas are written out locally instead of reusing the
optimized backends.
"""

from __future__ import annotations

import math

import numpy as np

from .sph import NEIGH_VOL, SphConfig, newton_smoothing

_SIGMA = 8.0 / math.pi


def _spline_all(q):
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


def _min_image(d, box):
    if box is None:
        return d
    return d - box * np.round(d / box)


def gather_all(x_i, h: float, x, m, box):
    """(rho, rho_dh, wcount, wcount_dh) at trial h over every particle."""
    d = _min_image(x_i[None, :] - x, box)
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    sel = r < h
    q = r[sel] / h
    w, dw = _spline_all(q)
    sig = _SIGMA / h**3
    W = sig * w
    dWdh = -sig / h * (3.0 * w + q * dw)
    msel = m[sel]
    return (float(msel @ W), float(msel @ dWdh), float(W.sum()), float(dWdh.sum()))


def oracle_density(x, v, m, u, h0, box, cfg: SphConfig, pid=None, h_limit=None):
    """Brute-force density phase with the same h-iteration the engine runs.

    ``h_limit`` (scalar or per-particle) mirrors the engine's reach caps so
    capped particles stay comparable; neighbour finding itself is all-pairs.
    Returns dict with rho, rho_dh, wcount, wcount_dh, h, omega, P, iters.
    """
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    u = np.asarray(u, dtype=float)
    n = len(m)
    if h_limit is None:
        limits = np.full(n, math.inf)
    else:
        limits = np.broadcast_to(np.asarray(h_limit, dtype=float), (n,))
    out = {name: np.zeros(n) for name in
           ("rho", "rho_dh", "wcount", "wcount_dh", "h", "omega", "P")}
    iters = np.zeros(n, dtype=int)
    capped_total = 0
    for i in range(n):
        state = gather_all(x[i], float(h0[i]), x, m, box)

        def gather(h_try, i=i):
            return gather_all(x[i], h_try, x, m, box)

        h_i, state, it, capped = newton_smoothing(
            int(pid[i]) if pid is not None else i, float(h0[i]), state, gather,
            cfg.eta_neigh, cfg.h_tolerance, cfg.h_max_iter, float(limits[i]))
        capped_total += int(capped)
        rho, rho_dh, wc, wc_dh = state
        out["rho"][i] = rho
        out["rho_dh"][i] = rho_dh
        out["wcount"][i] = wc
        out["wcount_dh"][i] = wc_dh
        out["h"][i] = h_i
        out["omega"][i] = 1.0 + (h_i / (3.0 * rho)) * rho_dh
        out["P"][i] = rho * u[i] * (cfg.gamma - 1.0)
        iters[i] = it
    out["n_neigh"] = NEIGH_VOL * out["h"] ** 3 * out["wcount"]
    out["iters"] = iters
    out["capped"] = capped_total
    return out


def oracle_forces(x, v, m, h, rho, omega, P, box, chunk: int = 64):
    """Brute-force force phase: (a, u_dot) for every particle."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = len(m)
    a = np.zeros((n, 3))
    u_dot = np.zeros(n)
    term = P / (omega * rho**2)
    for c0 in range(0, n, chunk):
        c1 = min(c0 + chunk, n)
        d = _min_image(x[c0:c1, None, :] - x[None, :, :], box)
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        hmax = np.maximum(h[c0:c1, None], h[None, :])
        sel = (r < hmax) & (r > 0.0)
        rs = np.where(sel, r, 1.0)
        q_i = np.where(sel, r / h[c0:c1, None], 1.0)
        q_j = np.where(sel, r / h[None, :], 1.0)
        _, dw_i = _spline_all(q_i)
        _, dw_j = _spline_all(q_j)
        dWdr_i = _SIGMA / h[c0:c1, None] ** 4 * dw_i
        dWdr_j = _SIGMA / h[None, :] ** 4 * dw_j
        bracket = np.where(sel, term[c0:c1, None] * dWdr_i + term[None, :] * dWdr_j, 0.0)
        rhat = d / rs[:, :, None]
        a[c0:c1] -= np.einsum("ij,ijk->ik", bracket * m[None, :], rhat)
        dv = v[c0:c1, None, :] - v[None, :, :]
        dv_r = np.einsum("ijk,ijk->ij", dv, rhat)
        u_dot[c0:c1] += term[c0:c1] * np.einsum(
            "ij,ij->i", m[None, :] * np.where(sel, dv_r, 0.0), dWdr_i)
    return a, u_dot


def oracle_step(x, v, m, u, h0, box, cfg: SphConfig, h_limit=None):
    """One density + force phase from scratch (no kick)."""
    dens = oracle_density(x, v, m, u, h0, box, cfg, h_limit=h_limit)
    a, u_dot = oracle_forces(x, v, m, dens["h"], dens["rho"], dens["omega"],
                             dens["P"], box)
    dens["a"] = a
    dens["u_dot"] = u_dot
    return dens
