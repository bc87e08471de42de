"""Compiled RK4 tracer for radial field histories.

Mirrors characteristics.trace_back for a FieldHistory whose external part is
radial: same stages, same time interpolation, same Hermite evaluation of
the enclosed charge.  The numpy path remains the reference; the tests
compare the two.
"""
import math

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; the portable layer avoids the probe
numba.config.THREADING_LAYER = "workqueue"

FOUR_PI = 4.0 * math.pi


@njit(cache=True)
def _hermite(nodes, M, D, k, r):
    """Enclosed charge and its derivative for snapshot k."""
    n = nodes.shape[0]
    r1 = nodes[0]
    if r < r1:
        c = M[k, 0] / (r1 * r1 * r1)
        return c * r * r * r, 3.0 * c * r * r
    if r > nodes[n - 1]:
        return M[k, n - 1], 0.0
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if nodes[mid] <= r:
            lo = mid
        else:
            hi = mid
    h = nodes[lo + 1] - nodes[lo]
    s = (r - nodes[lo]) / h
    m0, m1, d0, d1 = M[k, lo], M[k, lo + 1], D[k, lo], D[k, lo + 1]
    m = ((1 + 2 * s) * (1 - s) ** 2 * m0 + s * (1 - s) ** 2 * h * d0
         + s * s * (3 - 2 * s) * m1 + s * s * (s - 1) * h * d1)
    dm = (6 * s * (s - 1) * (m0 - m1) / h + (1 - s) * (1 - 3 * s) * d0
          + s * (3 * s - 2) * d1)
    return m, dm


@njit(cache=True)
def _snap_radial(nodes, M, D, k, r):
    """h = m/r^2, h' and the density m'/(4 pi r^2) for snapshot k."""
    r1 = nodes[0]
    if r < r1:
        c = M[k, 0] / (r1 * r1 * r1)
        return c * r, c, 3.0 * c / FOUR_PI
    m, dm = _hermite(nodes, M, D, k, r)
    ir2 = 1.0 / (r * r)
    return m * ir2, (dm - 2.0 * m / r) * ir2, dm * ir2 / FOUR_PI


@njit(cache=True)
def _bracket(times, s):
    K = times.shape[0]
    if K == 1:
        return 0, 0, 0.0
    lo, hi = 0, K - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if times[mid] <= s:
            lo = mid
        else:
            hi = mid
    th = (s - times[lo]) / (times[lo + 1] - times[lo])
    th = min(max(th, 0.0), 1.0)
    return lo, lo + 1, th


@njit(cache=True)
def _interp_clamped(xp, fp, x):
    n = xp.shape[0]
    if x <= xp[0]:
        return fp[0]
    if x >= xp[n - 1]:
        return fp[n - 1]
    for i in range(n - 1):
        if x < xp[i + 1]:
            w = (x - xp[i]) / (xp[i + 1] - xp[i])
            return (1.0 - w) * fp[i] + w * fp[i + 1]
    return fp[n - 1]


@njit(cache=True)
def _total_radial(times, nodes, M, D, ext_code, sched_t, sched_v, s, r):
    k0, k1, th = _bracket(times, s)
    h, dh, rho = _snap_radial(nodes, M, D, k0, r)
    if th > 0.0:
        h1, dh1, rho1 = _snap_radial(nodes, M, D, k1, r)
        h = (1 - th) * h + th * h1
        dh = (1 - th) * dh + th * dh1
        rho = (1 - th) * rho + th * rho1
    if ext_code == 1:
        a = _interp_clamped(sched_t, sched_v, s)
        q = 1.0 + r * r
        iq = 1.0 / (q * math.sqrt(q))
        h += a * r * iq
        dh += a * (1.0 - 2.0 * r * r) * iq / q
    return h, dh, rho


@njit(cache=True)
def _rhs(times, nodes, M, D, ext_code, sched_t, sched_v, s, t, y, out,
         variational, bg_F0, bg_W, source, leading):
    # y layout: X(3) V(3) G(9) Dm(9) S L
    x0, x1, x2 = y[0], y[1], y[2]
    r = math.sqrt(x0 * x0 + x1 * x1 + x2 * x2)
    h, dh, rho = _total_radial(times, nodes, M, D, ext_code, sched_t, sched_v, s, r)
    if r > 0:
        hr = h / r
        n0, n1, n2 = x0 / r, x1 / r, x2 / r
    else:
        hr = dh
        n0 = n1 = n2 = 0.0
    E0, E1, E2 = hr * x0, hr * x1, hr * x2
    for k in range(3):
        out[k] = y[3 + k]
    out[3] = -E0
    out[4] = -E1
    out[5] = -E2
    if variational:
        c = dh - hr
        st = s - t
        # K = hr I + c n n^T;  dG/ds = Dm;  dDm/ds = -K G - (s - t) K
        for i in range(9):
            out[6 + i] = y[15 + i]
        for j in range(3):
            g0, g1, g2 = y[6 + j], y[9 + j], y[12 + j]
            cnd = c * (n0 * g0 + n1 * g1 + n2 * g2)
            cnj = c * (n0 if j == 0 else (n1 if j == 1 else n2)) * st
            out[15 + j] = -(hr * g0 + n0 * cnd) - n0 * cnj
            out[18 + j] = -(hr * g1 + n1 * cnd) - n1 * cnj
            out[21 + j] = -(hr * g2 + n2 * cnd) - n2 * cnj
        out[15] -= st * hr
        out[19] -= st * hr
        out[23] -= st * hr
    if source:
        v0, v1, v2 = y[3], y[4], y[5]
        u = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
        sw = min(u / bg_W, 1.0)
        d1 = -6.0 * bg_F0 * sw * (1.0 - sw * sw) ** 2 / bg_W
        if u > 0:
            out[24] = d1 * (E0 * v0 + E1 * v1 + E2 * v2) / u
        else:
            out[24] = 0.0
    if leading:
        out[25] = -FOUR_PI * (s - t) * rho


@njit(parallel=True, cache=True)
def trace_radial(times, nodes, M, D, ext_code, sched_t, sched_v, t, hs, X0, V0,
                 variational, bg_F0, bg_W, source, leading):
    n = X0.shape[0]
    out = np.zeros((n, 26))
    for p in prange(n):
        y = np.zeros(26)
        for k in range(3):
            y[k] = X0[p, k]
            y[3 + k] = V0[p, k]
        k1 = np.zeros(26)
        k2 = np.zeros(26)
        k3 = np.zeros(26)
        k4 = np.zeros(26)
        tmp = np.zeros(26)
        s = t
        for h_abs in hs:
            h = -h_abs
            _rhs(times, nodes, M, D, ext_code, sched_t, sched_v, s, t, y, k1,
                 variational, bg_F0, bg_W, source, leading)
            for i in range(26):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            _rhs(times, nodes, M, D, ext_code, sched_t, sched_v, s + 0.5 * h, t, tmp, k2,
                 variational, bg_F0, bg_W, source, leading)
            for i in range(26):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            _rhs(times, nodes, M, D, ext_code, sched_t, sched_v, s + 0.5 * h, t, tmp, k3,
                 variational, bg_F0, bg_W, source, leading)
            for i in range(26):
                tmp[i] = y[i] + h * k3[i]
            _rhs(times, nodes, M, D, ext_code, sched_t, sched_v, s + h, t, tmp, k4,
                 variational, bg_F0, bg_W, source, leading)
            for i in range(26):
                y[i] += (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (h / 6.0)
            s += h
        for i in range(26):
            out[p, i] = y[i]
    return out
