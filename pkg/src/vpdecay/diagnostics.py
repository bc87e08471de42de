"""Weighted norms, tail-exponent fits, boundedness verdicts and the
four-term split of the velocity-averaged field source.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import p_of_q


def R(r):
    return np.sqrt(1.0 + np.asarray(r, dtype=float) ** 2)


def weighted_sup(values, r, a):
    """max_i |values_i| (1 + r_i^2)^(a/2)."""
    if a < 0:
        raise ValueError("weight exponent must be non-negative")
    values = np.asarray(values, dtype=float)
    return float(np.max(np.abs(values) * (1.0 + np.asarray(r) ** 2) ** (0.5 * a), initial=0.0))


def velocity_support(state, threshold, W):
    """Largest u node carrying |g| > threshold, never below W."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    active = np.max(np.abs(state.g), axis=(0, 2)) > threshold
    u = state.grid.u[active]
    return float(max(W, u.max())) if u.size else float(W)


@dataclass
class ExponentFit:
    r_lo: float
    r_hi: float
    exponent: float
    intercept: float
    residual_rms: float
    points: int

    def as_dict(self):
        return dict(self.__dict__)


def fit_tail_exponent(rho, r, window=(100.0, 1000.0), floor=1e-14, min_points=8):
    """Least-squares fit of log|rho| against log r; exponent = -slope."""
    rho = np.abs(np.asarray(rho, dtype=float))
    r = np.asarray(r, dtype=float)
    lo, hi = window
    use = (r >= lo * (1 - 1e-12)) & (r <= hi * (1 + 1e-12)) & (rho > floor)
    n = int(np.count_nonzero(use))
    if n < min_points:
        raise ValueError(f"only {n} usable points in [{lo}, {hi}] (need {min_points})")
    lx, ly = np.log(r[use]), np.log(rho[use])
    slope, icpt = np.polyfit(lx, ly, 1)
    res = ly - (slope * lx + icpt)
    return ExponentFit(float(lo), float(hi), float(-slope), float(icpt),
                       float(np.sqrt(np.mean(res**2))), n)


def grad_g_parts(state):
    """Pointwise |grad_x g| and |grad_v g| from derivatives in (r, u, mu).

    With mu = x.v/(|x||v|): |grad_x g|^2 = g_r^2 + g_mu^2 (1 - mu^2)/r^2 and
    |grad_v g|^2 = g_u^2 + g_mu^2 (1 - mu^2)/u^2.  One-sided differences are
    used on the axis ends.
    """
    grid = state.grid
    g = state.g
    g_r = np.gradient(g, grid.r, axis=0, edge_order=1)
    g_u = np.gradient(g, grid.u, axis=1, edge_order=1)
    g_mu = np.gradient(g, grid.mu, axis=2, edge_order=1)
    r = grid.r[:, None, None]
    u = grid.u[None, :, None]
    s2 = (1.0 - grid.mu**2)[None, None, :]
    ang = g_mu**2 * s2
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = np.sqrt(g_r**2 + np.where(r > 0, ang / np.where(r > 0, r, 1.0) ** 2, 0.0))
        gv = np.sqrt(g_u**2 + np.where(u > 0, ang / np.where(u > 0, u, 1.0) ** 2, 0.0))
    return gx, gv


def norm_report(state, rho, snapshot, background, q=16.0, window=(100.0, 1000.0),
                floor=1e-14, min_points=8, q_threshold=1e-12):
    grid = state.grid
    r = grid.r
    p = p_of_q(q)
    weight = 1.0 + r[:, None, None] ** 2 + grid.u[None, :, None] ** q
    gx, gv = grad_g_parts(state)
    g_norm = float(np.max(np.abs(state.g) * weight))
    gx_norm = float(np.max(gx * weight))
    gv_norm = float(np.max(gv * weight))
    grad_norm = float(np.max(np.sqrt(gx**2 + gv**2) * weight))
    rho_p = weighted_sup(rho, r, p)
    try:
        fit = fit_tail_exponent(rho, r, window, floor, min_points).as_dict()
    except ValueError as exc:
        fit = {"exponent": float("nan"), "error": str(exc)}
    tail = r >= window[0]
    return {
        "t": float(state.t),
        "rho_sup": float(np.max(np.abs(rho))),
        "rho_norm_4": weighted_sup(rho, r, 4.0),
        "rho_norm_6": weighted_sup(rho, r, 6.0),
        "rho_norm_p": rho_p,
        "g_norm_q": g_norm,
        "grad_g_norm_q": grad_norm,
        "grad_x_g_norm_q": gx_norm,
        "grad_v_g_norm_q": gv_norm,
        "triple": g_norm + grad_norm + rho_p,
        "Q_t": velocity_support(state, q_threshold, background.W),
        "m_sup": float(np.max(np.abs(snapshot.m))),
        "P_t": float(np.max(r**4 * np.abs(rho))),
        "Psi_t": weighted_sup(rho, r, 6.0),
        "g_tail_r2": float(np.max(np.abs(state.g[tail]) * r[tail, None, None] ** 2, initial=0.0)),
        "fit": fit,
        "fit_exponent": fit["exponent"],
    }


def gronwall_monitor(series, keys=("m_sup", "P_t", "Psi_t", "rho_norm_p"), ceiling=10.0,
                     rate_limit=0.5, r2_min=0.9, persist=0.9):
    """Boundedness verdicts for monitored series.

    The reference is the first nonzero value.  log|y| is fitted linearly in
    t over the whole record; the growth counts as exponential when the rate
    exceeds rate_limit, R^2 >= r2_min and the growth persists to the end
    (last value >= persist * max).  "bounded" means ratio <= ceiling and no
    exponential growth.
    """
    if len(series) < 2:
        raise ValueError("need at least two reports")
    t = np.array([s["t"] for s in series], dtype=float)
    out = {}
    for key in keys:
        y = np.abs(np.array([s[key] for s in series], dtype=float))
        if not np.all(np.isfinite(y)):
            out[key] = {"ratio": float("inf"), "rate": float("nan"), "r2": 0.0,
                        "verdict": "unbounded", "trivial": False}
            continue
        nz = np.nonzero(y > 0)[0]
        if nz.size == 0:
            out[key] = {"ratio": 1.0, "rate": 0.0, "r2": 1.0, "verdict": "bounded", "trivial": True}
            continue
        ref = y[nz[0]]
        ratio = float(np.max(y) / ref)
        rate, r2 = 0.0, 0.0
        if nz.size >= 3 and np.ptp(t[nz]) > 0:
            ly = np.log(y[nz])
            coef = np.polyfit(t[nz], ly, 1)
            rate = float(coef[0])
            ss = float(np.sum((ly - ly.mean()) ** 2))
            r2 = 1.0 - float(np.sum((ly - np.polyval(coef, t[nz])) ** 2)) / ss if ss > 0 else 0.0
        exponential = rate > rate_limit and r2 >= r2_min and y[-1] >= persist * np.max(y)
        ok = ratio <= ceiling and not exponential
        out[key] = {"ratio": ratio, "rate": rate, "r2": r2,
                    "verdict": "bounded" if ok else "unbounded", "trivial": False}
    return out


# ---------------------------------------------------------- decomposition


def field_integral_decomposition(history, t, x, background, dt_ode, s=0.0, Q=None,
                                 n_u=24, n_theta=24, n_phi=32):
    """Terms I to IV of the velocity-averaged source at time s.

    With Y = x + (s - t) v the straight-line position,
      I   = int field(s, X(s)) . (grad F(V(s)) - grad F(v)) dv
      II  = int (field(s, X(s)) - field(s, Y)) . grad F(v) dv
      III = int div_v (F(v) field(s, Y)) dv        (divergence theorem: 0)
      IV  = int F(v) div_v field(s, Y) dv = (s - t) int F(v) div field(s, Y) dv
    Integrals run over |v| <= W where F lives.  Signed values are returned.
    """
    from .characteristics import trace_back, velocity_quadrature

    x = np.asarray(x, dtype=float)
    W = background.W
    Q = W if Q is None else Q
    if np.linalg.norm(x) < 8.0 * Q * t:
        raise ValueError(f"|x| = {np.linalg.norm(x):.4g} is below 8 Q t = {8 * Q * t:.4g}")
    v, w = velocity_quadrature(W, W, n_u=n_u, n_theta=n_theta, n_phi=n_phi)
    xs = np.broadcast_to(x, v.shape)
    st, _, _ = trace_back(history, t, xs, v, s, dt_ode)
    Y = xs + (s - t) * v
    EX = history.field(s, st.X)
    EY = history.field(s, Y)
    gF = background.gradient(v)
    gFV = background.gradient(st.V)
    divY = np.trace(history.jacobian(s, Y), axis1=-2, axis2=-1)
    Fv = background(v)
    dot = lambda a, b: np.einsum("nk,nk->n", a, b)  # noqa: E731
    I = float(np.sum(w * dot(EX, gFV - gF)))
    II = float(np.sum(w * dot(EX - EY, gF)))
    IV = float(np.sum(w * Fv * (s - t) * divY))
    III = float(np.sum(w * dot(gF, EY))) + IV
    total = float(np.sum(w * dot(EX, gFV)))
    return {"x": x.tolist(), "t": float(t), "s": float(s), "I": I, "II": II, "III": III,
            "IV": IV, "total": total, "closure_defect": total - (I + II + III - IV)}
