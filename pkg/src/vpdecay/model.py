"""Background, initial data and external-field families, plus a numerical
auditor for the structural conditions those families must satisfy.

All evaluators are vectorized: positions and velocities are arrays whose
last axis has length 3.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc
from scipy.spatial.transform import Rotation

CRITICAL_Q = 7.0 + math.sqrt(33.0)


def p_of_q(q):
    """Spatial decay exponent paired with the phase-space weight exponent q."""
    q = float(q)
    if not q > CRITICAL_Q:
        raise ValueError(f"q = {q} must exceed 7 + sqrt(33) = {CRITICAL_Q:.6f}")
    return 4.0 - 8.0 / q


@dataclass(frozen=True)
class ExponentPair:
    q: float = 16.0

    def __post_init__(self):
        p_of_q(self.q)

    @property
    def p(self):
        return p_of_q(self.q)


@dataclass(frozen=True)
class Background:
    """Isotropic background F(v) = F_R(|v|), supported in |v| < W.

    The only profile implemented is the cubic bump
    F_R(u) = F0 (1 - (u/W)^2)^3, which is C^2 across the cutoff.
    """

    F0: float = 1.0
    W: float = 1.0
    profile: str = "cubic"

    def __post_init__(self):
        if self.profile != "cubic":
            raise ValueError(f"unknown background profile {self.profile!r}")
        if not (self.F0 > 0 and self.W > 0):
            raise ValueError("F0 and W must be positive")

    def radial(self, u):
        s = np.clip(np.asarray(u, dtype=float) / self.W, 0.0, 1.0)
        return self.F0 * (1.0 - s * s) ** 3

    def radial_d1(self, u):
        s = np.clip(np.asarray(u, dtype=float) / self.W, 0.0, 1.0)
        return -6.0 * self.F0 * s * (1.0 - s * s) ** 2 / self.W

    def radial_d2(self, u):
        s = np.clip(np.asarray(u, dtype=float) / self.W, 0.0, 1.0)
        w = 1.0 - s * s
        return self.F0 * (-6.0 * w * w + 24.0 * s * s * w) / self.W**2

    def __call__(self, v):
        return self.radial(np.linalg.norm(v, axis=-1))

    def gradient(self, v):
        v = np.asarray(v, dtype=float)
        u = np.linalg.norm(v, axis=-1)
        safe = np.where(u > 0, u, 1.0)
        return (self.radial_d1(u) / safe)[..., None] * v

    def total(self):
        """Exact value of the integral of F over velocity space."""
        return 4.0 * math.pi * self.F0 * self.W**3 * 16.0 / 315.0


def eval_background(spec: Background, u):
    return spec.radial(u)


def grad_background(spec: Background, v):
    return spec.gradient(v)


def bump(s):
    """C^1 radial bump on [0, 1) with bump(0) = 1."""
    s = np.abs(np.asarray(s, dtype=float))
    return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0) ** 2) ** 2, 0.0)


@dataclass(frozen=True)
class InitialData:
    """f0(x, v) = F(v) (1 - delta * bump(|x| / N)); equals F for |x| >= N."""

    background: Background = field(default_factory=Background)
    delta: float = 0.5
    N: float = 1.0
    shape: str = "bump"

    def __post_init__(self):
        if self.shape != "bump":
            raise ValueError(f"unknown perturbation shape {self.shape!r}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not self.N > 0:
            raise ValueError("N must be positive")

    def deviation_reduced(self, r, u):
        """g0 = F - f0 as a function of |x| and |v|."""
        return self.delta * bump(np.asarray(r) / self.N) * self.background.radial(u)

    def __call__(self, x, v):
        r = np.linalg.norm(x, axis=-1)
        F = self.background(v)
        return F - self.delta * bump(r / self.N) * F

    def sup(self):
        return self.background.F0


def eval_initial(spec: InitialData, x, v):
    return spec(x, v)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear coefficient table, clamped at the end points."""

    times: tuple = (0.0,)
    values: tuple = (0.0,)

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("schedule needs matching, non-empty times and values")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be strictly increasing")

    @classmethod
    def constant(cls, c):
        return cls((0.0,), (float(c),))

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


EXTERNAL_VARIANTS = ("none", "radial3", "swirl4")


@dataclass(frozen=True)
class ExternalField:
    """External field families.

    radial3: a(t) x (1+|x|^2)^{-3/2}, spherically symmetric.
    swirl4:  c(t) (-x2, x1, 0) (1+|x|^2)^{-3/2}, exactly divergence free.
    """

    variant: str = "none"
    schedule: Schedule = field(default_factory=lambda: Schedule.constant(0.0))

    def __post_init__(self):
        if self.variant not in EXTERNAL_VARIANTS:
            raise ValueError(f"unknown external field variant {self.variant!r}")

    @property
    def is_radial(self):
        return self.variant in ("none", "radial3")

    @property
    def divergence_free(self):
        return self.variant in ("none", "swirl4")

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.variant == "none":
            return np.zeros_like(x)
        c = self.schedule(t)
        phi = (1.0 + np.sum(x * x, axis=-1)) ** -1.5
        if self.variant == "radial3":
            return (c * phi)[..., None] * x
        w = np.stack([-x[..., 1], x[..., 0], np.zeros_like(x[..., 0])], axis=-1)
        return (c * phi)[..., None] * w

    def jacobian(self, t, x):
        """J[..., k, i] = d A_k / d x_i."""
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape + (3,))
        if self.variant == "none":
            return J
        c = self.schedule(t)
        q = 1.0 + np.sum(x * x, axis=-1)
        phi = q**-1.5
        dphi = (-3.0 * q**-2.5)[..., None] * x
        if self.variant == "radial3":
            J = phi[..., None, None] * np.eye(3) + x[..., :, None] * dphi[..., None, :]
        else:
            w = np.stack([-x[..., 1], x[..., 0], np.zeros_like(x[..., 0])], axis=-1)
            rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
            J = phi[..., None, None] * rot + w[..., :, None] * dphi[..., None, :]
        return c * J if np.ndim(c) == 0 else np.asarray(c)[..., None, None] * J

    def radial_profile(self, t, r):
        """Radial component h_A(t, r) of a radial3 field and its r-derivative."""
        r = np.asarray(r, dtype=float)
        if self.variant != "radial3":
            return np.zeros_like(r), np.zeros_like(r)
        a = self.schedule(t)
        q = 1.0 + r * r
        return a * r * q**-1.5, a * (1.0 - 2.0 * r * r) * q**-2.5


def eval_external(spec: ExternalField, t, x):
    return spec(t, x)


# ---------------------------------------------------------------- audit


def _fd_jacobian(A, t, x, h):
    """Central-difference Jacobian of a field callable, J[n, k, i]."""
    J = np.empty(x.shape + (3,))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        step = h[:, None] * e
        J[..., i] = (A(t, x + step) - A(t, x - step)) / (2.0 * h[:, None])
    return J


def _sample_points(n, seed, T, radius, vmax):
    """Scrambled-Sobol samples of (t, x, v) on the audit window."""
    with warnings.catch_warnings():
        # budgets such as 10^4 are not powers of two; balance is not needed here
        warnings.simplefilter("ignore", UserWarning)
        pts = qmc.Sobol(d=9, scramble=True, seed=seed).random(n)
    t = pts[:, 0] * T
    rx = 10.0 ** (-3.0 + pts[:, 1] * (3.0 + math.log10(radius)))
    rv = vmax * pts[:, 5] ** (1.0 / 3.0)

    def direction(a, b):
        cos_t = 2.0 * a - 1.0
        sin_t = np.sqrt(1.0 - cos_t**2)
        ph = 2.0 * math.pi * b
        return np.stack([sin_t * np.cos(ph), sin_t * np.sin(ph), cos_t], axis=-1)

    x = rx[:, None] * direction(pts[:, 2], pts[:, 3])
    v = rv[:, None] * direction(pts[:, 6], pts[:, 7])
    u = pts[:, 8] * 2.0 * vmax
    return t, x, v, u


def _worst(values, points):
    k = int(np.argmax(values))
    return float(values[k]), np.asarray(points[k]).tolist()


def audit_conditions(background, initial, external, *, T=1.0, q=16.0,
                     n_samples=4096, seed=0, radius=1.0e4, ceiling=10.0):
    """Sample the structural conditions on [0, T] x {|x| <= radius}.

    `external` may be an ExternalField or any callable A(t, x).  Every
    derivative used here is a central finite difference of the callable, so
    the audit does not trust analytic Jacobians.  Each condition entry holds
    a pass flag, the worst sampled weighted ratio and a witness point.
    """
    if n_samples < 1:
        raise ValueError("sample budget must be at least 1")
    p = p_of_q(q)
    W = background.W
    t, x, v, u = _sample_points(n_samples, seed, T, radius, 2.0 * W)
    rot = Rotation.random(n_samples, random_state=seed).as_matrix()
    report = {}

    # (I) background shape
    uu = np.linspace(0.0, W, 2001)[1:-1]
    d1 = background.radial_d1(uu)
    eps = 1e-4 * W
    fd2_0 = (2.0 * background.radial(eps) - 2.0 * background.radial(0.0)) / eps**2
    outside = background.radial(u[u >= W]) if np.any(u >= W) else np.zeros(1)
    jump = max(
        abs(float(fn(W * (1 - 1e-12)) - fn(W * (1 + 1e-12))))
        for fn in (background.radial, background.radial_d1, background.radial_d2)
    )
    c2_ok = jump <= 1e-10 * background.F0 / W**2
    report["I"] = {
        "pass": bool(np.all(d1 < 0) and fd2_0 < 0 and np.all(outside == 0)
                     and np.all(background.radial(u) >= 0) and c2_ok),
        "max_F_outside_support": float(np.max(np.abs(outside))),
        "max_FR_prime_inside": float(np.max(d1)),
        "FR_second_at_0": float(fd2_0),
        "C2_jump_at_W": jump,
    }

    # (II) initial data
    f = initial(x, v)
    F = background(v)
    far = np.linalg.norm(x, axis=-1) > initial.N
    sym = np.abs(initial(np.einsum("nij,nj->ni", rot, x), np.einsum("nij,nj->ni", rot, v)) - f)
    unit_v = v / np.maximum(np.linalg.norm(v, axis=-1), 1e-300)[:, None]
    vsup = initial(x, W * (1.0 + 1e-9) * unit_v)
    report["II"] = {
        "pass": bool(np.all(f >= 0) and np.all(f[far] == F[far]) and np.max(sym) <= 1e-13
                     and np.all(vsup == 0)),
        "min_f0": float(np.min(f)),
        "max_far_mismatch": float(np.max(np.abs(f[far] - F[far]), initial=0.0)),
        "max_rotation_defect": float(np.max(sym)),
    }

    # field-dependent ratios (shared by III and IV)
    A = external
    r = np.linalg.norm(x, axis=-1)
    R2 = 1.0 + r * r
    h = 1e-4 * np.sqrt(R2)
    Ax = A(t, x)
    J = _fd_jacobian(A, t, x, h)
    absA = np.linalg.norm(Ax, axis=-1)
    absJ = np.linalg.norm(J, axis=(-2, -1))
    div = np.trace(J, axis1=-2, axis2=-1)
    # truncation of the central difference, measured against a half step
    J_half = _fd_jacobian(A, t, x, 0.5 * h)
    div_floor = np.abs(np.trace(J_half, axis1=-2, axis2=-1) - div) * 4.0 / 3.0 + 1e-9 * absJ
    sym_A = np.linalg.norm(A(t, np.einsum("nij,nj->ni", rot, x))
                           - np.einsum("nij,nj->ni", rot, Ax), axis=-1)

    ratio_A = absA * R2
    ratio_dA = absJ * R2
    ratio_div = np.abs(div) * R2**2
    ratio_dA3 = absJ * R2**1.5
    witness = np.concatenate([t[:, None], x], axis=1)

    # alpha(t, r) - a(t)/r, with a(t) = lim r * alpha(t, r) estimated far out
    beyond = r > initial.N
    alpha = np.einsum("ni,ni->n", Ax, x)  # alpha = A . x for A = alpha x / |x|^2
    if isinstance(external, ExternalField) and external.variant == "radial3":
        a_t = external.schedule(t)
    else:
        far_x = x / np.maximum(r, 1e-300)[:, None] * 1.0e6
        a_t = np.einsum("ni,ni->n", A(t, far_x), far_x) / 1.0e6
    alpha_excess = np.abs(alpha - a_t / np.maximum(r, 1e-300)) * R2 ** ((p - 2.0) / 2.0)
    alpha_excess = np.where(beyond, alpha_excess, 0.0)

    wA, xA = _worst(ratio_A, witness)
    wdA, xdA = _worst(ratio_dA, witness)
    wdiv, xdiv = _worst(ratio_div, witness)
    walpha, xalpha = _worst(alpha_excess, witness)
    symmetric = float(np.max(sym_A)) <= 1e-12 * max(1.0, float(np.max(absA)))
    report["III"] = {
        "pass": bool(max(wA, wdA, wdiv) <= ceiling and symmetric and np.all(np.isfinite(Ax))),
        "max_A_R2": wA, "witness_A": xA,
        "max_dA_R2": wdA, "witness_dA": xdA,
        "max_divA_R4": wdiv, "witness_divA": xdiv,
        "max_rotation_defect": float(np.max(sym_A)),
        "alpha_constant": walpha, "witness_alpha": xalpha,
        "alpha_constant_exceeds_1": bool(walpha > 1.0),
    }
    wdA3, xdA3 = _worst(ratio_dA3, witness)
    div_excess = np.abs(div) - div_floor
    wdv, xdv = _worst(div_excess, witness)
    report["IV"] = {
        "pass": bool(max(wA, wdA3) <= ceiling and wdv <= 0.0 and np.all(np.isfinite(Ax))),
        "max_A_R2": wA, "witness_A": xA,
        "max_dA_R3": wdA3, "witness_dA": xdA3,
        "max_abs_div": float(np.max(np.abs(div))),
        "max_div_above_fd_floor": wdv, "witness_div": xdv,
    }
    report["samples"] = int(n_samples)
    report["seed"] = int(seed)
    return report
