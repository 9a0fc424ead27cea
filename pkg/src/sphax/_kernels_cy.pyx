#cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
#cython: initializedcheck=False
"""Compiled kernel core.

Mirrors ``sphax._kernels_py`` function for function; every hot loop runs
with the GIL released so scheduler workers overlap on real cores.  Cell
data is passed as a :class:`CellArrays` bundle so buffer acquisition
happens once per cell per step instead of once per kernel call.  The
smoothing-length driver reproduces ``sph.newton_smoothing`` decision for
decision (same clamps, brackets, and stopping rule).
"""

from libc.math cimport INFINITY, fabs, floor, sqrt
from libc.stdlib cimport free, malloc, qsort

import numpy as np

from .sph import SmoothingError

NAME = "compiled"
COMPILED = True

cdef double SIGMA = 8.0 / 3.14159265358979323846
cdef double FOUR_PI = 4.0 * 3.14159265358979323846
cdef double NEIGH_VOL = FOUR_PI / 3.0


cdef class CellArrays:
    """Typed views over one particle store (rank-local or proxy)."""
    cdef double[:, ::1] x
    cdef double[:, ::1] v
    cdef double[:, ::1] v_pred
    cdef double[:, ::1] a
    cdef double[::1] m
    cdef double[::1] u
    cdef double[::1] h
    cdef double[::1] rho
    cdef double[::1] rho_dh
    cdef double[::1] wc
    cdef double[::1] wc_dh
    cdef double[::1] omega
    cdef double[::1] P
    cdef double[::1] u_dot
    cdef long[::1] pid

    def __init__(self, x, v, v_pred, m, u, h, rho, rho_dh, wc, wc_dh,
                 a, u_dot, omega, P, pid):
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


cdef inline void w_and_dwdr(double r, double h, double *w, double *dwdr) noexcept nogil:
    cdef double q = r / h
    cdef double sig = SIGMA / (h * h * h)
    cdef double qm
    if q <= 0.5:
        w[0] = sig * (1.0 + q * q * (6.0 * q - 6.0))
        dwdr[0] = sig / h * (q * (18.0 * q - 12.0))
    elif q < 1.0:
        qm = 1.0 - q
        w[0] = sig * (2.0 * qm * qm * qm)
        dwdr[0] = sig / h * (-6.0 * qm * qm)
    else:
        w[0] = 0.0
        dwdr[0] = 0.0


cdef inline void w_and_dwdh(double r, double h, double *w, double *dwdh) noexcept nogil:
    cdef double q = r / h
    cdef double sig = SIGMA / (h * h * h)
    cdef double qm, wq, dwq
    if q <= 0.5:
        wq = 1.0 + q * q * (6.0 * q - 6.0)
        dwq = q * (18.0 * q - 12.0)
    elif q < 1.0:
        qm = 1.0 - q
        wq = 2.0 * qm * qm * qm
        dwq = -6.0 * qm * qm
    else:
        w[0] = 0.0
        dwdh[0] = 0.0
        return
    w[0] = sig * wq
    dwdh[0] = -sig / h * (3.0 * wq + q * dwq)


def self_density(CellArrays c, Py_ssize_t start, Py_ssize_t end):
    """Density gathers within one cell, self term included."""
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, r, w, dwdh, hi
    with nogil:
        for i in range(start, end):
            hi = c.h[i]
            w_and_dwdh(0.0, hi, &w, &dwdh)
            c.rho[i] += c.m[i] * w
            c.rho_dh[i] += c.m[i] * dwdh
            c.wc[i] += w
            c.wc_dh[i] += dwdh
            for j in range(start, end):
                if j == i:
                    continue
                dx = c.x[i, 0] - c.x[j, 0]
                dy = c.x[i, 1] - c.x[j, 1]
                dz = c.x[i, 2] - c.x[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r < hi:
                    w_and_dwdh(r, hi, &w, &dwdh)
                    c.rho[i] += c.m[j] * w
                    c.rho_dh[i] += c.m[j] * dwdh
                    c.wc[i] += w
                    c.wc_dh[i] += dwdh


def pair_density(CellArrays ca, long[::1] idx_a, double[::1] proj_a,
                 CellArrays cb, long[::1] idx_b, double[::1] proj_b,
                 double sx, double sy, double sz, double proj_shift,
                 double reach, bint update_a, bint update_b):
    """Density gathers across a sorted cell pair (windowed sweep)."""
    cdef Py_ssize_t na = idx_a.shape[0]
    cdef Py_ssize_t nb = idx_b.shape[0]
    cdef Py_ssize_t k, jj, i, j, lo, hi_w
    cdef double pa, dx, dy, dz, r, w, dwdh, h_i, h_j
    with nogil:
        lo = 0
        hi_w = 0
        for k in range(na):
            pa = proj_a[k]
            while lo < nb and proj_b[lo] + proj_shift <= pa - reach:
                lo += 1
            while hi_w < nb and proj_b[hi_w] + proj_shift < pa + reach:
                hi_w += 1
            i = idx_a[k]
            h_i = ca.h[i]
            for jj in range(lo, hi_w):
                j = idx_b[jj]
                dx = ca.x[i, 0] - (cb.x[j, 0] + sx)
                dy = ca.x[i, 1] - (cb.x[j, 1] + sy)
                dz = ca.x[i, 2] - (cb.x[j, 2] + sz)
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if update_a and r < h_i:
                    w_and_dwdh(r, h_i, &w, &dwdh)
                    ca.rho[i] += cb.m[j] * w
                    ca.rho_dh[i] += cb.m[j] * dwdh
                    ca.wc[i] += w
                    ca.wc_dh[i] += dwdh
                if update_b:
                    h_j = cb.h[j]
                    if r < h_j:
                        w_and_dwdh(r, h_j, &w, &dwdh)
                        cb.rho[j] += ca.m[i] * w
                        cb.rho_dh[j] += ca.m[i] * dwdh
                        cb.wc[j] += w
                        cb.wc_dh[j] += dwdh


def self_force(CellArrays c, Py_ssize_t start, Py_ssize_t end):
    """Symmetric force/energy updates within one cell (each pair once)."""
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, r, rinv, hi, hj, wi, wj, dwi, dwj
    cdef double term_i, term_j, bracket, fx, fy, fz, dvr
    with nogil:
        for i in range(start, end):
            hi = c.h[i]
            term_i = c.P[i] / (c.omega[i] * c.rho[i] * c.rho[i])
            for j in range(i + 1, end):
                dx = c.x[i, 0] - c.x[j, 0]
                dy = c.x[i, 1] - c.x[j, 1]
                dz = c.x[i, 2] - c.x[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                hj = c.h[j]
                if r <= 0.0 or (r >= hi and r >= hj):
                    continue
                w_and_dwdr(r, hi, &wi, &dwi)
                w_and_dwdr(r, hj, &wj, &dwj)
                term_j = c.P[j] / (c.omega[j] * c.rho[j] * c.rho[j])
                bracket = term_i * dwi + term_j * dwj
                rinv = 1.0 / r
                fx = bracket * dx * rinv
                fy = bracket * dy * rinv
                fz = bracket * dz * rinv
                c.a[i, 0] -= c.m[j] * fx
                c.a[i, 1] -= c.m[j] * fy
                c.a[i, 2] -= c.m[j] * fz
                c.a[j, 0] += c.m[i] * fx
                c.a[j, 1] += c.m[i] * fy
                c.a[j, 2] += c.m[i] * fz
                dvr = ((c.v_pred[i, 0] - c.v_pred[j, 0]) * dx
                       + (c.v_pred[i, 1] - c.v_pred[j, 1]) * dy
                       + (c.v_pred[i, 2] - c.v_pred[j, 2]) * dz) * rinv
                c.u_dot[i] += term_i * c.m[j] * dvr * dwi
                c.u_dot[j] += term_j * c.m[i] * dvr * dwj


def pair_force(CellArrays ca, long[::1] idx_a, double[::1] proj_a,
               CellArrays cb, long[::1] idx_b, double[::1] proj_b,
               double sx, double sy, double sz, double proj_shift,
               double reach, bint update_a, bint update_b):
    """Force/energy updates across a sorted cell pair (windowed sweep)."""
    cdef Py_ssize_t na = idx_a.shape[0]
    cdef Py_ssize_t nb = idx_b.shape[0]
    cdef Py_ssize_t k, jj, i, j, lo, hi_w
    cdef double pa, dx, dy, dz, r, rinv, h_i, h_j, wi, wj, dwi, dwj
    cdef double term_i, term_j, bracket, fx, fy, fz, dvr
    with nogil:
        lo = 0
        hi_w = 0
        for k in range(na):
            pa = proj_a[k]
            while lo < nb and proj_b[lo] + proj_shift <= pa - reach:
                lo += 1
            while hi_w < nb and proj_b[hi_w] + proj_shift < pa + reach:
                hi_w += 1
            i = idx_a[k]
            h_i = ca.h[i]
            term_i = ca.P[i] / (ca.omega[i] * ca.rho[i] * ca.rho[i])
            for jj in range(lo, hi_w):
                j = idx_b[jj]
                dx = ca.x[i, 0] - (cb.x[j, 0] + sx)
                dy = ca.x[i, 1] - (cb.x[j, 1] + sy)
                dz = ca.x[i, 2] - (cb.x[j, 2] + sz)
                r = sqrt(dx * dx + dy * dy + dz * dz)
                h_j = cb.h[j]
                if r <= 0.0 or (r >= h_i and r >= h_j):
                    continue
                w_and_dwdr(r, h_i, &wi, &dwi)
                w_and_dwdr(r, h_j, &wj, &dwj)
                term_j = cb.P[j] / (cb.omega[j] * cb.rho[j] * cb.rho[j])
                bracket = term_i * dwi + term_j * dwj
                rinv = 1.0 / r
                fx = bracket * dx * rinv
                fy = bracket * dy * rinv
                fz = bracket * dz * rinv
                dvr = ((ca.v_pred[i, 0] - cb.v_pred[j, 0]) * dx
                       + (ca.v_pred[i, 1] - cb.v_pred[j, 1]) * dy
                       + (ca.v_pred[i, 2] - cb.v_pred[j, 2]) * dz) * rinv
                if update_a:
                    ca.a[i, 0] -= cb.m[j] * fx
                    ca.a[i, 1] -= cb.m[j] * fy
                    ca.a[i, 2] -= cb.m[j] * fz
                    ca.u_dot[i] += term_i * cb.m[j] * dvr * dwi
                if update_b:
                    cb.a[j, 0] += ca.m[i] * fx
                    cb.a[j, 1] += ca.m[i] * fy
                    cb.a[j, 2] += ca.m[i] * fz
                    cb.u_dot[j] += term_j * ca.m[i] * dvr * dwj


# ---------------------------------------------------------------------------
# sorting
# ---------------------------------------------------------------------------

cdef struct KeyIdx:
    double key
    long idx


cdef int _cmp_keyidx(const void *pa, const void *pb) noexcept nogil:
    cdef double ka = (<const KeyIdx *> pa).key
    cdef double kb = (<const KeyIdx *> pb).key
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    # stable-ish tie break on the original index
    if (<const KeyIdx *> pa).idx < (<const KeyIdx *> pb).idx:
        return -1
    if (<const KeyIdx *> pa).idx > (<const KeyIdx *> pb).idx:
        return 1
    return 0


def sort_cell(CellArrays c, Py_ssize_t start, Py_ssize_t end, axis_vec):
    """Sorted projection of a particle range onto an axis: (idx, proj)."""
    cdef double ax = axis_vec[0]
    cdef double ay = axis_vec[1]
    cdef double az = axis_vec[2]
    cdef Py_ssize_t n = end - start
    idx_out = np.empty(n, dtype=np.int64)
    proj_out = np.empty(n, dtype=np.float64)
    cdef long[::1] idx = idx_out
    cdef double[::1] proj = proj_out
    cdef KeyIdx *pairs
    cdef Py_ssize_t i
    with nogil:
        pairs = <KeyIdx *> malloc(n * sizeof(KeyIdx))
        if pairs != NULL:
            for i in range(n):
                pairs[i].key = c.x[start + i, 0] * ax + c.x[start + i, 1] * ay \
                    + c.x[start + i, 2] * az
                pairs[i].idx = start + i
            qsort(pairs, n, sizeof(KeyIdx), _cmp_keyidx)
            for i in range(n):
                idx[i] = pairs[i].idx
                proj[i] = pairs[i].key
            free(pairs)
    if n and pairs == NULL:
        raise MemoryError("sort_cell scratch allocation failed")
    return idx_out, proj_out


# ---------------------------------------------------------------------------
# ghost: smoothing-length adaptation
# ---------------------------------------------------------------------------

cdef inline void gather_window(double px, double py, double pz, double h_try,
                               double *cx, double *cm, Py_ssize_t nc,
                               double *rho, double *rho_dh,
                               double *wcv, double *wc_dhv) noexcept nogil:
    """Density gather over candidates sorted by their x coordinate."""
    cdef Py_ssize_t lo = 0, hi = nc, mid, c0, wlo, whi
    cdef double dx, dy, dz, r, w, dwdh
    while lo < hi:
        mid = (lo + hi) // 2
        if cx[3 * mid] <= px - h_try:
            lo = mid + 1
        else:
            hi = mid
    wlo = lo
    hi = nc
    while lo < hi:
        mid = (lo + hi) // 2
        if cx[3 * mid] < px + h_try:
            lo = mid + 1
        else:
            hi = mid
    whi = lo
    rho[0] = 0.0
    rho_dh[0] = 0.0
    wcv[0] = 0.0
    wc_dhv[0] = 0.0
    for c0 in range(wlo, whi):
        dx = px - cx[3 * c0]
        dy = py - cx[3 * c0 + 1]
        dz = pz - cx[3 * c0 + 2]
        r = sqrt(dx * dx + dy * dy + dz * dz)
        if r < h_try:
            w_and_dwdh(r, h_try, &w, &dwdh)
            rho[0] += cm[c0] * w
            rho_dh[0] += cm[c0] * dwdh
            wcv[0] += w
            wc_dhv[0] += dwdh


def ghost_update(CellArrays c, Py_ssize_t start, Py_ssize_t end,
                 double[:, ::1] cand_x, double[::1] cand_m, double eta,
                 double tol, int max_iter, double h_limit, double gamma):
    """Smoothing-length adaptation; mirrors sph.newton_smoothing exactly."""
    cdef Py_ssize_t nc = cand_m.shape[0]
    cdef Py_ssize_t i, k
    cdef int it, capped_total = 0
    cdef Py_ssize_t err_i = -1
    cdef double hi, rr, rr_dh, wcv, wc_dhv, h_lo, h_hi, nn, f, fp, dh, h_new
    cdef bint converged, capped, dh_valid
    cdef KeyIdx *order
    cdef double *cx
    cdef double *cm
    with nogil:
        # Sort candidates by x coordinate for windowed gathers.
        order = <KeyIdx *> malloc(nc * sizeof(KeyIdx))
        cx = <double *> malloc(3 * nc * sizeof(double))
        cm = <double *> malloc(nc * sizeof(double))
        if order != NULL and cx != NULL and cm != NULL:
            for k in range(nc):
                order[k].key = cand_x[k, 0]
                order[k].idx = k
            qsort(order, nc, sizeof(KeyIdx), _cmp_keyidx)
            for k in range(nc):
                cx[3 * k] = cand_x[order[k].idx, 0]
                cx[3 * k + 1] = cand_x[order[k].idx, 1]
                cx[3 * k + 2] = cand_x[order[k].idx, 2]
                cm[k] = cand_m[order[k].idx]

            for i in range(start, end):
                hi = c.h[i]
                rr = c.rho[i]
                rr_dh = c.rho_dh[i]
                wcv = c.wc[i]
                wc_dhv = c.wc_dh[i]
                h_lo = 0.0
                h_hi = INFINITY
                converged = False
                capped = False
                for it in range(max_iter):
                    nn = NEIGH_VOL * (hi * hi * hi) * wcv
                    f = nn - eta
                    fp = FOUR_PI * (hi * hi) * wcv \
                        + NEIGH_VOL * (hi * hi * hi) * wc_dhv
                    dh_valid = fp > 0.0
                    if f < 0.0:
                        if hi > h_lo:
                            h_lo = hi
                    else:
                        if hi < h_hi:
                            h_hi = hi
                    if dh_valid:
                        dh = -f / fp
                        if fabs(dh) <= tol * hi:
                            converged = True
                            break
                        h_new = hi + dh
                    else:
                        h_new = INFINITY
                    if h_new < 0.5 * hi:
                        h_new = 0.5 * hi
                    if h_new > 2.0 * hi:
                        h_new = 2.0 * hi
                    if h_hi != INFINITY and not (h_lo < h_new and h_new < h_hi):
                        h_new = 0.5 * (h_lo + h_hi)
                    if h_new >= h_limit:
                        capped = True
                        if hi >= h_limit:
                            break
                        h_new = h_limit
                    hi = h_new
                    gather_window(c.x[i, 0], c.x[i, 1], c.x[i, 2], hi, cx, cm,
                                  nc, &rr, &rr_dh, &wcv, &wc_dhv)
                if not converged and not capped:
                    # Bisection recovery, mirroring the reference driver.
                    while h_hi == INFINITY:
                        if hi >= h_limit:
                            capped = True
                            break
                        hi = 2.0 * hi
                        if hi > h_limit:
                            hi = h_limit
                        gather_window(c.x[i, 0], c.x[i, 1], c.x[i, 2], hi, cx,
                                      cm, nc, &rr, &rr_dh, &wcv, &wc_dhv)
                        nn = NEIGH_VOL * (hi * hi * hi) * wcv
                        f = nn - eta
                        if f < 0.0:
                            if hi > h_lo:
                                h_lo = hi
                        else:
                            h_hi = hi
                    if not capped:
                        for it in range(max_iter):
                            if h_hi - h_lo <= tol * hi:
                                converged = True
                                break
                            hi = 0.5 * (h_lo + h_hi)
                            gather_window(c.x[i, 0], c.x[i, 1], c.x[i, 2], hi,
                                          cx, cm, nc, &rr, &rr_dh, &wcv,
                                          &wc_dhv)
                            nn = NEIGH_VOL * (hi * hi * hi) * wcv
                            f = nn - eta
                            if f < 0.0:
                                h_lo = hi
                            else:
                                h_hi = hi
                        if not converged:
                            err_i = i
                            c.h[i] = hi
                            c.wc[i] = wcv
                            break
                if capped:
                    capped_total += 1
                c.h[i] = hi
                c.rho[i] = rr
                c.rho_dh[i] = rr_dh
                c.wc[i] = wcv
                c.wc_dh[i] = wc_dhv
                c.omega[i] = 1.0 + (hi / (3.0 * rr)) * rr_dh
                c.P[i] = rr * c.u[i] * (gamma - 1.0)
        free(order)
        free(cx)
        free(cm)
    if err_i >= 0:
        nn_py = NEIGH_VOL * float(c.h[err_i]) ** 3 * float(c.wc[err_i])
        raise SmoothingError(int(c.pid[err_i]), float(c.h[err_i]), nn_py)
    return capped_total


def spin(long long reps):
    """GIL-free fixed-work busy loop for machine parallelism calibration."""
    cdef double acc = 0.0
    cdef long long i
    with nogil:
        for i in range(reps):
            acc += sqrt(acc + 1.000001)
    return acc


def kick(CellArrays c, double dt, box, double u_floor,
         Py_ssize_t start, Py_ssize_t end):
    """Leapfrog kick-drift-kick plus internal-energy update for a slice."""
    cdef double bx = box[0]
    cdef double by = box[1]
    cdef double bz = box[2]
    cdef double half = 0.5 * dt
    cdef Py_ssize_t i
    cdef double unew
    with nogil:
        for i in range(start, end):
            c.v[i, 0] += c.a[i, 0] * half
            c.v[i, 1] += c.a[i, 1] * half
            c.v[i, 2] += c.a[i, 2] * half
            c.x[i, 0] += c.v[i, 0] * dt
            c.x[i, 1] += c.v[i, 1] * dt
            c.x[i, 2] += c.v[i, 2] * dt
            c.x[i, 0] -= bx * floor(c.x[i, 0] / bx)
            c.x[i, 1] -= by * floor(c.x[i, 1] / by)
            c.x[i, 2] -= bz * floor(c.x[i, 2] / bz)
            # tiny negative coordinates can round the wrap up to exactly box
            if c.x[i, 0] >= bx:
                c.x[i, 0] = 0.0
            if c.x[i, 1] >= by:
                c.x[i, 1] = 0.0
            if c.x[i, 2] >= bz:
                c.x[i, 2] = 0.0
            c.v[i, 0] += c.a[i, 0] * half
            c.v[i, 1] += c.a[i, 1] * half
            c.v[i, 2] += c.a[i, 2] * half
            unew = c.u[i] + c.u_dot[i] * dt
            c.u[i] = unew if unew > u_floor else u_floor
            c.v_pred[i, 0] = c.v[i, 0] + c.a[i, 0] * half
            c.v_pred[i, 1] = c.v[i, 1] + c.a[i, 1] * half
            c.v_pred[i, 2] = c.v[i, 2] + c.a[i, 2] * half
