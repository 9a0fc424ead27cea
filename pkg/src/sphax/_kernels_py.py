"""Pure-NumPy kernel backend.

Fallback for environments where the compiled extension is unavailable.
Same public surface as ``sphax._kernels_cy``; the engine picks one at
import time (see ``sphax.backend``).  Windowed/vectorized formulations
keep memory bounded; all accumulation is double precision.
"""

from __future__ import annotations

import numpy as np

from .sph import KERNEL_SIGMA, newton_smoothing

NAME = "python"
COMPILED = False


class CellArrays:
    """Array bundle over one particle store (rank-local or proxy)."""

    __slots__ = ("x", "v", "v_pred", "m", "u", "h", "rho", "rho_dh", "wc",
                 "wc_dh", "a", "u_dot", "omega", "P", "pid")

    def __init__(self, x, v, v_pred, m, u, h, rho, rho_dh, wc, wc_dh, a,
                 u_dot, omega, P, pid):
        self.x = x
        self.v = v
        self.v_pred = v_pred
        self.m = m
        self.u = u
        self.h = h
        self.rho = rho
        self.rho_dh = rho_dh
        self.wc = wc
        self.wc_dh = wc_dh
        self.a = a
        self.u_dot = u_dot
        self.omega = omega
        self.P = P
        self.pid = pid


def cell_arrays(store) -> CellArrays:
    pid = getattr(store, "pid", None)
    if pid is None:
        pid = np.zeros(len(store.m), dtype=np.int64)
    v_pred = getattr(store, "v_pred", store.v)  # proxies carry predicted v
    return CellArrays(store.x, store.v, v_pred, store.m, store.u, store.h,
                      store.rho, store.rho_dh, store.wcount, store.wcount_dh,
                      store.a, store.u_dot, store.omega, store.P, pid)


def _w_dwdr(r, h):
    """Spline value and radial derivative; h may broadcast against r."""
    q = r / h
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
    sig = KERNEL_SIGMA / (h * h * h)
    return sig * w, sig / h * dw


def _w_dwdh(r, h):
    """Spline value and d/dh; h may broadcast against r."""
    q = r / h
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
    sig = KERNEL_SIGMA / (h * h * h)
    return sig * w, -sig / h * (3.0 * w + q * dw)


def self_density(c: CellArrays, start, end):
    """Density gathers within one cell, self term included (the diagonal)."""
    xs = c.x[start:end]
    hs = c.h[start:end]
    ms = c.m[start:end]
    n = end - start
    chunk = max(1, min(n, 2 ** 22 // max(n, 1)))
    for c0 in range(0, n, chunk):
        c1 = min(c0 + chunk, n)
        d = xs[c0:c1, None, :] - xs[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        hrow = hs[c0:c1, None]
        mask = r < hrow
        w, dwdh = _w_dwdh(np.where(mask, r, 0.0), hrow)
        w[~mask] = 0.0
        dwdh[~mask] = 0.0
        c.rho[start + c0:start + c1] += w @ ms
        c.rho_dh[start + c0:start + c1] += dwdh @ ms
        c.wc[start + c0:start + c1] += w.sum(axis=1)
        c.wc_dh[start + c0:start + c1] += dwdh.sum(axis=1)


def pair_density(ca: CellArrays, idx_a, proj_a, cb: CellArrays, idx_b, proj_b,
                 sx, sy, sz, proj_shift, reach, update_a, update_b):
    """Density gathers across a sorted cell pair.

    ``idx_*`` index the full per-store arrays, ordered by the aligned
    ``proj_*`` values; (sx, sy, sz) maps b's positions into a's frame.
    Only pairs with projected separation < reach are visited.
    """
    shift = np.array([sx, sy, sz])
    pb = proj_b + proj_shift
    xb_eff = cb.x[idx_b] + shift
    hb_sel = cb.h[idx_b]
    mb_sel = cb.m[idx_b]
    for k, i in enumerate(idx_a):
        pa = proj_a[k]
        lo = np.searchsorted(pb, pa - reach, side="left")
        hi = np.searchsorted(pb, pa + reach, side="right")
        if lo >= hi:
            continue
        d = ca.x[i] - xb_eff[lo:hi]
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        if update_a:
            sel = r < ca.h[i]
            if np.any(sel):
                w, dwdh = _w_dwdh(r[sel], ca.h[i])
                msel = mb_sel[lo:hi][sel]
                ca.rho[i] += msel @ w
                ca.rho_dh[i] += msel @ dwdh
                ca.wc[i] += w.sum()
                ca.wc_dh[i] += dwdh.sum()
        if update_b:
            sel = r < hb_sel[lo:hi]
            if np.any(sel):
                jsel = idx_b[lo:hi][sel]
                w, dwdh = _w_dwdh(r[sel], hb_sel[lo:hi][sel])
                cb.rho[jsel] += ca.m[i] * w
                cb.rho_dh[jsel] += ca.m[i] * dwdh
                cb.wc[jsel] += w
                cb.wc_dh[jsel] += dwdh


def self_force(c: CellArrays, start, end):
    """Force/energy gathers within one cell (full gather per particle)."""
    xs = c.x[start:end]
    vs = c.v_pred[start:end]
    hs = c.h[start:end]
    ms = c.m[start:end]
    term = c.P[start:end] / (c.omega[start:end] * c.rho[start:end] ** 2)
    n = end - start
    for row in range(n):
        i = start + row
        d = xs[row] - xs
        rr = np.sqrt(np.einsum("ij,ij->i", d, d))
        rr[row] = np.inf  # no self force
        sel = (rr < np.maximum(hs[row], hs)) & (rr > 0.0)
        if not np.any(sel):
            continue
        rsel = rr[sel]
        rhat = d[sel] / rsel[:, None]
        _, dw_i = _w_dwdr(rsel, hs[row])
        _, dw_j = _w_dwdr(rsel, hs[sel])
        bracket = term[row] * dw_i + term[sel] * dw_j
        f = bracket[:, None] * rhat
        c.a[i] -= ms[sel] @ f
        dv_r = np.einsum("ij,ij->i", vs[row] - vs[sel], rhat)
        c.u_dot[i] += term[row] * (ms[sel] @ (dv_r * dw_i))


def pair_force(ca: CellArrays, idx_a, proj_a, cb: CellArrays, idx_b, proj_b,
               sx, sy, sz, proj_shift, reach, update_a, update_b):
    """Force/energy gathers across a sorted cell pair (see pair_density)."""
    shift = np.array([sx, sy, sz])
    pb = proj_b + proj_shift
    xb_eff = cb.x[idx_b] + shift
    vb_sel = cb.v_pred[idx_b]
    hb_sel = cb.h[idx_b]
    mb_sel = cb.m[idx_b]
    term_b = cb.P[idx_b] / (cb.omega[idx_b] * cb.rho[idx_b] ** 2)
    for k, i in enumerate(idx_a):
        pa = proj_a[k]
        lo = np.searchsorted(pb, pa - reach, side="left")
        hi = np.searchsorted(pb, pa + reach, side="right")
        if lo >= hi:
            continue
        d = ca.x[i] - xb_eff[lo:hi]
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        sel = (r < np.maximum(ca.h[i], hb_sel[lo:hi])) & (r > 0.0)
        if not np.any(sel):
            continue
        rsel = r[sel]
        rhat = d[sel] / rsel[:, None]
        _, dw_i = _w_dwdr(rsel, ca.h[i])
        _, dw_j = _w_dwdr(rsel, hb_sel[lo:hi][sel])
        term_i = ca.P[i] / (ca.omega[i] * ca.rho[i] ** 2)
        bracket = term_i * dw_i + term_b[lo:hi][sel] * dw_j
        f = bracket[:, None] * rhat
        msel = mb_sel[lo:hi][sel]
        dv_r = np.einsum("ij,ij->i", ca.v_pred[i] - vb_sel[lo:hi][sel], rhat)
        if update_a:
            ca.a[i] -= msel @ f
            ca.u_dot[i] += term_i * (msel @ (dv_r * dw_i))
        if update_b:
            jsel = idx_b[lo:hi][sel]
            cb.a[jsel] += ca.m[i] * f
            cb.u_dot[jsel] += term_b[lo:hi][sel] * ca.m[i] * dv_r * dw_j


def sort_cell(c: CellArrays, start, end, axis_vec):
    """Sorted projection of a particle range onto an axis: (idx, proj)."""
    proj = c.x[start:end] @ np.asarray(axis_vec)
    order = np.argsort(proj, kind="stable")
    return np.arange(start, end, dtype=np.int64)[order], proj[order]


def ghost_update(c: CellArrays, start, end, cand_x, cand_m, eta, tol,
                 max_iter, h_limit, gamma):
    """Smoothing-length adaptation for a cell's particles.

    ``cand_*`` stack the cell's own particles plus every paired cell's,
    pre-shifted into this cell's frame (so gathers need no wrapping).
    Returns the number of particles capped at h_limit.
    """
    capped_total = 0
    for i in range(start, end):
        xi = c.x[i]

        def gather(h_try, xi=xi):
            d = xi - cand_x
            r = np.sqrt(np.einsum("ij,ij->i", d, d))
            sel = r < h_try
            w, dwdh = _w_dwdh(r[sel], h_try)
            msel = cand_m[sel]
            return (float(msel @ w), float(msel @ dwdh),
                    float(w.sum()), float(dwdh.sum()))

        state = (float(c.rho[i]), float(c.rho_dh[i]),
                 float(c.wc[i]), float(c.wc_dh[i]))
        h_i, state, _, capped = newton_smoothing(
            int(c.pid[i]), float(c.h[i]), state, gather, eta, tol,
            max_iter, h_limit)
        c.h[i] = h_i
        c.rho[i], c.rho_dh[i], c.wc[i], c.wc_dh[i] = state
        c.omega[i] = 1.0 + (h_i / (3.0 * c.rho[i])) * c.rho_dh[i]
        c.P[i] = c.rho[i] * c.u[i] * (gamma - 1.0)
        capped_total += int(capped)
    return capped_total


def kick(c: CellArrays, dt, box, u_floor, start, end):
    """Leapfrog kick-drift-kick plus internal-energy update for a slice."""
    sl = slice(start, end)
    half = 0.5 * dt
    c.v[sl] += c.a[sl] * half
    c.x[sl] += c.v[sl] * dt
    wrapped = np.mod(c.x[sl], box)
    # tiny negative coordinates can round the wrap up to exactly box
    c.x[sl] = np.where(wrapped >= box, 0.0, wrapped)
    c.v[sl] += c.a[sl] * half
    c.u[sl] = np.maximum(c.u[sl] + c.u_dot[sl] * dt, u_floor)
    c.v_pred[sl] = c.v[sl] + c.a[sl] * half
