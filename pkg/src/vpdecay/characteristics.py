"""Backward characteristics, the variational (Jacobian) system and the
checks built on them.

Field objects are duck-typed: anything with ``field(s, X)`` and
``jacobian(s, X)`` (J[..., k, i] = d field_k / d x_i) can be traced.
FieldHistory is the one used by the solver; ConstantField and LinearField
are closed-form fields for oracles.

Conventions
-----------
dX/ds = V,  dV/ds = -field(s, X),  A = dX/dv,  B = dV/dv  with
dA/ds = B,  dB/ds = -grad(field) A.   At s = t: A = 0, B = I.

The matrices are integrated as deviations gamma = A - (s - t) I and
dB = B - I so that tiny far-field Jacobians keep full relative precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import radial_jacobian, radial_vector


@dataclass
class CharState:
    s: float
    X: np.ndarray
    V: np.ndarray


@dataclass
class VariationalState:
    gamma: np.ndarray
    dB: np.ndarray
    s: float
    t: float
    J6: np.ndarray = None

    @property
    def A_mat(self):
        return self.gamma + (self.s - self.t) * np.eye(3)

    @property
    def B_mat(self):
        return self.dB + np.eye(3)

    def det_B_minus_1(self):
        return det_identity_plus_minus_1(self.dB)

    def det_J6(self):
        return None if self.J6 is None else np.linalg.det(self.J6)


def det_identity_plus_minus_1(D):
    """det(I + D) - 1 without forming I + D (exact expansion for 3x3)."""
    D = np.asarray(D)
    tr = np.trace(D, axis1=-2, axis2=-1)
    minors = (D[..., 0, 0] * D[..., 1, 1] - D[..., 0, 1] * D[..., 1, 0]
              + D[..., 0, 0] * D[..., 2, 2] - D[..., 0, 2] * D[..., 2, 0]
              + D[..., 1, 1] * D[..., 2, 2] - D[..., 1, 2] * D[..., 2, 1])
    return tr + minors + np.linalg.det(D)


# ------------------------------------------------------------ fields


class ZeroField:
    divergence_free = True

    def field(self, s, X):
        return np.zeros_like(np.asarray(X, dtype=float))

    def jacobian(self, s, X):
        X = np.asarray(X, dtype=float)
        return np.zeros(X.shape + (3,))

    def density(self, s, X):
        return np.zeros(np.shape(X)[:-1])


class ConstantField(ZeroField):
    def __init__(self, e0):
        self.e0 = np.asarray(e0, dtype=float)

    def field(self, s, X):
        return np.broadcast_to(self.e0, np.shape(X)).copy()


class LinearField(ZeroField):
    """field(s, X) = e0 + K X with a constant matrix K."""

    def __init__(self, e0, K):
        self.e0 = np.asarray(e0, dtype=float)
        self.K = np.asarray(K, dtype=float)
        self.divergence_free = bool(abs(np.trace(self.K)) < 1e-15)

    def field(self, s, X):
        return self.e0 + np.asarray(X) @ self.K.T

    def jacobian(self, s, X):
        return np.broadcast_to(self.K, np.shape(X) + (3,)).copy()

    def density(self, s, X):
        return np.full(np.shape(X)[:-1], np.trace(self.K) / (4.0 * math.pi))


class ExternalOnly(ZeroField):
    """Trace in an external field alone (no self-consistent part)."""

    def __init__(self, external):
        self.external = external
        self.divergence_free = external.divergence_free

    def field(self, s, X):
        return self.external(s, X)

    def jacobian(self, s, X):
        return self.external.jacobian(s, X)


class FieldHistory:
    """Radial snapshots at increasing times plus an external field.

    The self-consistent part is linear in time between snapshots.
    """

    def __init__(self, snapshots, external, tol=1e-9):
        self.snapshots = list(snapshots)
        self.external = external
        self.tol = tol
        times = [s.t for s in self.snapshots]
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshots must be strictly ordered in time")

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])

    @property
    def divergence_free(self):
        return self.external.divergence_free

    def append(self, snap):
        if self.snapshots and snap.t <= self.snapshots[-1].t:
            raise ValueError("snapshot time must increase")
        self.snapshots.append(snap)

    def replace_last(self, snap):
        self.snapshots[-1] = snap

    def _bracket(self, s):
        times = self.times
        if s < times[0] - self.tol or s > times[-1] + self.tol:
            raise ValueError(f"time {s} outside field history [{times[0]}, {times[-1]}]")
        if len(times) == 1:
            return 0, 0, 0.0
        k = int(np.clip(np.searchsorted(times, s, side="right") - 1, 0, len(times) - 2))
        theta = float(np.clip((s - times[k]) / (times[k + 1] - times[k]), 0.0, 1.0))
        return k, k + 1, theta

    def radial(self, s, r):
        """Radial profile of the total field when the external part is radial."""
        k0, k1, th = self._bracket(s)
        h0, d0 = self.snapshots[k0].radial(r)
        if th == 0.0:
            h, d = h0, d0
        else:
            h1, d1 = self.snapshots[k1].radial(r)
            h, d = (1 - th) * h0 + th * h1, (1 - th) * d0 + th * d1
        if self.external.is_radial:
            ha, da = self.external.radial_profile(s, r)
            h, d = h + ha, d + da
        return h, d

    def self_radial(self, s, r):
        k0, k1, th = self._bracket(s)
        h0, d0 = self.snapshots[k0].radial(r)
        if th == 0.0:
            return h0, d0
        h1, d1 = self.snapshots[k1].radial(r)
        return (1 - th) * h0 + th * h1, (1 - th) * d0 + th * d1

    def field(self, s, X):
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X, axis=-1)
        if self.external.is_radial:
            h, _ = self.radial(s, r)
            return radial_vector(h, X)
        h, _ = self.self_radial(s, r)
        return radial_vector(h, X) + self.external(s, X)

    def jacobian(self, s, X):
        if self.external.is_radial:
            return radial_jacobian(lambda r: self.radial(s, r), X)
        J = radial_jacobian(lambda r: self.self_radial(s, r), X)
        return J + self.external.jacobian(s, X)

    def density(self, s, X):
        """Charge density consistent with the divergence of the field."""
        r = np.linalg.norm(np.asarray(X, dtype=float), axis=-1)
        k0, k1, th = self._bracket(s)
        out = self.snapshots[k0].density_at(r)
        if th > 0.0:
            out = (1 - th) * out + th * self.snapshots[k1].density_at(r)
        return out

    def time_integral_sup(self, t=None):
        """Trapezoid estimate of int_0^t sup_x |field(tau, x)| dtau."""
        snaps = [s for s in self.snapshots if t is None or s.t <= t + self.tol]
        sups = []
        for snap in snaps:
            rr = np.concatenate([snap.r[1:], np.geomspace(1e-3, 1e3, 200)])
            h, _ = snap.radial(rr)
            hx = np.abs(h)
            if self.external.is_radial:
                hx = np.abs(h + self.external.radial_profile(snap.t, rr)[0])
            else:
                hx = hx + _external_sup(self.external, snap.t)
            sups.append(float(np.max(hx)))
        times = np.array([s.t for s in snaps])
        if len(times) < 2:
            return 0.0
        return float(np.trapezoid(sups, times))

    def packed(self):
        """Arrays consumed by the compiled tracer."""
        snaps = self.snapshots
        nodes = snaps[0].r[1:]
        M = np.array([s.m[1:] for s in snaps])
        D = np.array([s.slopes for s in snaps])
        ext = self.external
        code = 1 if ext.variant == "radial3" else 0
        sched = ext.schedule
        return (self.times, nodes, M, D, code, np.asarray(sched.times, dtype=float),
                np.asarray(sched.values, dtype=float))

    def gradient_constant(self, t=None, r_lo=1e-3):
        """sup over snapshots and radii of |grad field| |x|^3."""
        best = 0.0
        for snap in self.snapshots:
            if t is not None and snap.t > t + self.tol:
                continue
            rr = np.concatenate([snap.r[snap.r > r_lo], np.geomspace(r_lo, 1e4, 400)])
            x = np.stack([rr, np.zeros_like(rr), np.zeros_like(rr)], axis=-1)
            J = self.jacobian(snap.t, x)
            best = max(best, float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1)) * rr**3)))
        return best


def _external_sup(external, t):
    if external.variant == "none":
        return 0.0
    rr = np.geomspace(1e-3, 1e3, 400)
    x = np.stack([rr / math.sqrt(2), rr / math.sqrt(2), np.zeros_like(rr)], axis=-1)
    return float(np.max(np.linalg.norm(external(t, x), axis=-1)))


# ------------------------------------------------------------- tracing


def _steps(t, s_target, dt_ode):
    """Step sizes from t down to s_target: full dt_ode steps, last one shortened."""
    span = t - s_target
    if span < 0:
        raise ValueError("s_target must not exceed t")
    if span == 0:
        return []
    n_full = int(math.floor(span / dt_ode * (1 + 1e-12)))
    hs = [dt_ode] * n_full
    rest = span - n_full * dt_ode
    if rest > 1e-12 * max(1.0, span) or not hs:
        hs.append(rest)
    else:
        hs[-1] += rest
    return hs


def trace_back(history, t, x, v, s_target, dt_ode, *, variational=False, j6=False,
               source=None, leading=False, bounds=None):
    """RK4 from s = t down to s = s_target.

    Options co-integrate extra quantities with the same stages:
      variational  gamma and dB (returned in a VariationalState)
      j6           the 6x6 phase-space Jacobian
      source       callable (s, X, V, field) -> rate; S(t) = 0 and dS/ds = rate
      leading      L with dL/ds = -4 pi (s - t) rho(s, X), L(t) = 0
    bounds: (r_max, u_max) beyond which a ValueError is raised.
    Returns (CharState, VariationalState or None, extras dict).
    """
    X = np.array(x, dtype=float, copy=True)
    V = np.array(v, dtype=float, copy=True)
    X, V = np.broadcast_arrays(X, V)
    X, V = X.copy(), V.copy()
    shape = X.shape[:-1]
    eye = np.eye(3)
    need_jac = variational or j6
    G = np.zeros(shape + (3, 3)) if variational else None
    D = np.zeros(shape + (3, 3)) if variational else None
    J = np.broadcast_to(np.eye(6), shape + (6, 6)).copy() if j6 else None
    S = np.zeros(shape) if source is not None else None
    L = np.zeros(shape) if leading else None

    def rhs(s, X, V, G, D, J):
        E = history.field(s, X)
        out = {"X": V, "V": -E}
        if need_jac:
            K = history.jacobian(s, X)
            if variational:
                out["G"] = D
                out["D"] = -(K @ G) - (s - t) * K
            if j6:
                out["J"] = np.concatenate([J[..., 3:, :], -(K @ J[..., :3, :])], axis=-2)
        if source is not None:
            out["S"] = source(s, X, V, E)
        if leading:
            out["L"] = -4.0 * math.pi * (s - t) * history.density(s, X)
        return out

    def add(base, k, c):
        return None if base is None else base + c * k

    s = t
    for h in _steps(t, s_target, dt_ode):
        h = -h
        k1 = rhs(s, X, V, G, D, J)

        def shifted(k, c):
            return (X + c * k["X"], V + c * k["V"],
                    add(G, k.get("G"), c), add(D, k.get("D"), c), add(J, k.get("J"), c))

        k2 = rhs(s + h / 2, *shifted(k1, h / 2))
        k3 = rhs(s + h / 2, *shifted(k2, h / 2))
        k4 = rhs(s + h, *shifted(k3, h))

        def comb(name):
            return (k1[name] + 2 * k2[name] + 2 * k3[name] + k4[name]) * (h / 6)

        X = X + comb("X")
        V = V + comb("V")
        if G is not None:
            G = G + comb("G")
            D = D + comb("D")
        if J is not None:
            J = J + comb("J")
        if S is not None:
            S = S + comb("S")
        if L is not None:
            L = L + comb("L")
        s = s + h
        if bounds is not None:
            r_max, u_max = bounds
            if np.any(np.linalg.norm(X, axis=-1) > r_max) or np.any(np.linalg.norm(V, axis=-1) > u_max):
                raise ValueError("trajectory left the evaluable domain")
    s = float(s_target)
    var = VariationalState(G, D, s, t, J) if (variational or j6) else None
    if var is not None and G is None:
        var.gamma = np.zeros(shape + (3, 3))
        var.dB = np.zeros(shape + (3, 3))
    extras = {}
    if S is not None:
        extras["source"] = S
    if L is not None:
        extras["leading"] = L
    return CharState(s, X, V), var, extras


def trace_radial_history(history, t, x, v, s_target, dt_ode, *, variational=False,
                         source_background=None, leading=False, compiled=True):
    """trace_back specialised to a FieldHistory with a radial external field.

    Uses the compiled kernel when available; source_background switches on
    the Duhamel source  rate = field . grad F(V).
    """
    if not compiled or not (isinstance(history, FieldHistory) and history.external.is_radial):
        source = None
        if source_background is not None:
            bg = source_background

            def source(s, X, V, E):
                return np.einsum("...k,...k->...", E, bg.gradient(V))
        return trace_back(history, t, x, v, s_target, dt_ode, variational=variational,
                          source=source, leading=leading)
    from ._kernels import trace_radial

    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    shape = x.shape[:-1]
    if s_target > t:
        raise ValueError("s_target must not exceed t")
    times = history.times
    if s_target < times[0] - history.tol or t > times[-1] + history.tol:
        raise ValueError(f"interval [{s_target}, {t}] outside field history")
    hs = np.array(_steps(t, s_target, dt_ode), dtype=float)
    bg = source_background
    out = trace_radial(*history.packed(), float(t), hs,
                       np.ascontiguousarray(x.reshape(-1, 3)),
                       np.ascontiguousarray(v.reshape(-1, 3)),
                       bool(variational), float(bg.F0) if bg else 1.0,
                       float(bg.W) if bg else 1.0, bg is not None, bool(leading))
    X = out[:, 0:3].reshape(shape + (3,))
    V = out[:, 3:6].reshape(shape + (3,))
    var = None
    if variational:
        var = VariationalState(out[:, 6:15].reshape(shape + (3, 3)),
                               out[:, 15:24].reshape(shape + (3, 3)), float(s_target), t)
    extras = {}
    if bg is not None:
        extras["source"] = out[:, 24].reshape(shape)
    if leading:
        extras["leading"] = out[:, 25].reshape(shape)
    return CharState(float(s_target), X, V), var, extras


def trace_variational(history, t, x, v, s_target, dt_ode, j6=False):
    state, var, _ = trace_back(history, t, x, v, s_target, dt_ode, variational=True, j6=j6)
    return state, var


def forward(history, s0, X0, V0, t, dt_ode):
    """Integrate forward from (s0, X0, V0) to time t (reversibility checks)."""

    class _Reversed:
        def field(self, s, X):
            return history.field(-s, X)

        def jacobian(self, s, X):
            return history.jacobian(-s, X)

    # with sigma = -s and W = -V:  dX/dsigma = W, dW/dsigma = -field(-sigma, X)
    state, _, _ = trace_back(_Reversed(), -s0, X0, -np.asarray(V0), -t, dt_ode)
    return CharState(t, state.X, -state.V)


# ----------------------------------------------------- derived checks


def det_B_expansion(history, t, x, v, dt_ode):
    """det B(0) against its leading term 1 + 4 pi int_0^t (tau - t) rho dtau.

    Returns det B, det B - 1, the leading correction and the residual
    (det B - 1) - leading.  Requires a divergence-free external field.
    """
    if not getattr(history, "divergence_free", False):
        raise ValueError("det B expansion needs a divergence-free external field")
    _, var, extras = trace_back(history, t, x, v, 0.0, dt_ode, variational=True, leading=True)
    dm1 = var.det_B_minus_1()
    lead = extras["leading"]
    return {"det_B": 1.0 + dm1, "det_B_minus_1": dm1, "leading": lead,
            "residual": dm1 - lead}


def admissibility_radius(history, t, D, Q):
    """C_D = max{8 (D + C5 T), 2 T Q, 4 (6 C4 C3 T)^(1/3)} from measured constants.

    C5 = int_0^t sup |field|, C3 = sup |grad field| |x|^3 and C4 bounds |A|;
    with the far-field estimate |A(s)| <= (t - s) (1 + C5) we take
    C4 = t (1 + C5).
    """
    C5 = history.time_integral_sup(t)
    C3 = history.gradient_constant(t)
    C4 = t * (1.0 + C5)
    CD = max(8.0 * (D + C5 * t), 2.0 * t * Q, 4.0 * (6.0 * C4 * C3 * t) ** (1.0 / 3.0))
    return {"C_D": CD, "C3": C3, "C4": C4, "C5": C5}


def sample_ball(n, radius, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return radius * rng.random(n)[:, None] ** (1.0 / 3.0) * d


def injectivity_probe(history, t, x, D, n_samples, seed, dt_ode, Q=None):
    if n_samples < 2:
        raise ValueError("need at least two samples")
    x = np.asarray(x, dtype=float)
    v = sample_ball(n_samples, D, seed)
    state, var, _ = trace_radial_history(history, t, np.broadcast_to(x, v.shape), v, 0.0, dt_ode,
                                         variational=True)
    dv = np.linalg.norm(v[:, None] - v[None, :], axis=-1)
    dV = np.linalg.norm(state.V[:, None] - state.V[None, :], axis=-1)
    iu = np.triu_indices(n_samples, 1)
    ratios = dV[iu] / dv[iu]
    det_B = 1.0 + var.det_B_minus_1()
    A_norm = float(np.max(np.linalg.norm(var.A_mat, ord=2, axis=(-2, -1))))
    report = {
        "x": x.tolist(), "t": float(t), "D": float(D), "seed": int(seed),
        "n_samples": int(n_samples),
        "min_ratio": float(ratios.min()), "max_ratio": float(ratios.max()),
        "min_detB": float(det_B.min()), "max_A_norm": A_norm,
        "contraction_violations": int(np.count_nonzero(ratios < 0.5)),
    }
    if Q is not None and hasattr(history, "time_integral_sup"):
        adm = admissibility_radius(history, t, D, Q)
        report.update(adm)
        report["admissible"] = bool(np.linalg.norm(x) > adm["C_D"])
    report["injective_evidence"] = bool(report["min_ratio"] > 0 and report["min_detB"] > 0)
    return report


def composite_gauss(breaks, n):
    """Gauss-Legendre nodes/weights on consecutive panels given by breaks."""
    xg, wg = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        nodes.append(0.5 * (b - a) * xg + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * wg)
    return np.concatenate(nodes), np.concatenate(weights)


def velocity_quadrature(u_max, W, n_u=24, n_theta=24, n_phi=32, panels=4):
    """Product rule on the ball |v| <= u_max, with a panel break at |v| = W."""
    inner = np.linspace(0.0, min(u_max, W), panels + 1)
    breaks = inner if u_max <= W else np.concatenate([inner, [u_max]])
    u, wu = composite_gauss(breaks, n_u)
    c, wc = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    wphi = np.full(n_phi, 2.0 * math.pi / n_phi)
    U, C, P = np.meshgrid(u, c, phi, indexing="ij")
    S = np.sqrt(1.0 - C * C)
    v = np.stack([U * S * np.cos(P), U * S * np.sin(P), U * C], axis=-1)
    w = (wu * u * u)[:, None, None] * wc[None, :, None] * wphi[None, None, :]
    return v.reshape(-1, 3), w.ravel()


def change_of_variables_check(history, t, x, background, dt_ode, u_max=None, **quad):
    """lhs = int F(V(0; t, x, v)) det B dv over a ball, rhs = int F exactly."""
    u_max = background.W * 1.5 if u_max is None else u_max
    v, w = velocity_quadrature(u_max, background.W, **quad)
    x = np.broadcast_to(np.asarray(x, dtype=float), v.shape)
    state, var, _ = trace_radial_history(history, t, x, v, 0.0, dt_ode, variational=True)
    dm1 = var.det_B_minus_1()
    if np.any(1.0 + dm1 <= 0):
        raise ValueError("det B <= 0 encountered: change of variables inadmissible here")
    Fv = background(state.V)
    lhs = float(np.sum(w * Fv * (1.0 + dm1)))
    rhs = background.total()
    return {"x": np.asarray(x[0]).tolist(), "t": float(t), "lhs": lhs, "rhs": rhs,
            "relerr": abs(lhs - rhs) / rhs, "min_detB": float(np.min(1.0 + dm1))}
