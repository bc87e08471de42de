"""Semi-Lagrangian time stepping for the deviation g = F - f.

Each macro step traces every grid node back over one step (predictor with
the field frozen at the old time, one corrector with the field linear in
time) and sets g from the feet.  Only the deviation is interpolated; the
background enters analytically.

Far from the perturbation the charge density is a small remainder of
cancelling velocity integrals, and interpolation error in g would swamp
it.  At a fixed cadence the solver therefore re-evaluates g on the outer
shells exactly from the initial data, tracing each node back to t = 0
together with det(dV/dv), and takes the density there from the identity

    rho(t, x) = int F(V0) (det dV0/dv - 1) dv + int g0(X0, V0) dv,

which holds whenever v -> V0 is a bijection and contains no cancellation.
Between two closures the outer density is extrapolated linearly from the
last two closure values; once the next closure lands, the intermediate
field snapshots are corrected by linear interpolation between the two.
Only charge inside a radius affects the field there, so this correction
touches only trajectories on the outer shells themselves.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as diag
from .characteristics import FieldHistory, trace_radial_history
from .field import RadialFieldSnapshot, compute_density
from .model import Background, ExternalField, InitialData, Schedule, audit_conditions, p_of_q
from .phase_grid import DeviationState, Interpolator, build_grid, lift, node_coords, project, range_violations


class BlowUp(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n_r: int = 128
    n_u: int = 32
    n_mu: int = 16
    r_max: float = 1000.0
    u_max: float = 1.5

    def build(self):
        return build_grid(self.n_r, self.n_u, self.n_mu, self.r_max, self.u_max)


@dataclass(frozen=True)
class SimConfig:
    T: float = 2.0
    dt: float = 0.02
    dt_ode: float = 0.0          # 0 means dt
    scheme: str = "transport"
    corrector: bool = True
    grid: GridSpec = field(default_factory=GridSpec)
    background: Background = field(default_factory=Background)
    initial: InitialData = field(default_factory=InitialData)
    external: ExternalField = field(
        default_factory=lambda: ExternalField("radial3", Schedule.constant(0.1)))
    q: float = 16.0
    tail_exponent: float = 2.0
    closure: bool = True
    closure_every: int = 0       # steps; 0 means record_every
    closure_margin: float = 1.0  # closure shells start at N + W t + margin
    closure_dt_ode: float = 0.0  # 0 means dt_ode
    record_every: int = 0        # steps; 0 means round(0.1 / dt), at least 1
    snapshot_every: int = 0      # steps; 0 disables snapshot dumps
    blowup_factor: float = 1.0e3
    fit_r_lo: float = 100.0
    fit_r_hi: float = 1000.0
    fit_floor: float = 1.0e-14
    fit_min_points: int = 8
    ceiling: float = 10.0
    audit: bool = True
    audit_samples: int = 4096
    seed: int = 0
    compiled: bool = True

    def __post_init__(self):
        p_of_q(self.q)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T = {self.T} is not an integer multiple of dt = {self.dt}")
        if self.dt_ode < 0 or self.dt_ode > self.dt * (1 + 1e-12):
            raise ValueError("dt_ode must satisfy 0 < dt_ode <= dt")
        if self.scheme not in ("transport", "duhamel"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.external.is_radial:
            raise ValueError("the reduced solver needs a spherically symmetric external field")
        if self.grid.r_max <= self.initial.N:
            raise ValueError("grid must cover the perturbation support N")
        if self.initial.background != self.background:
            raise ValueError("initial data must use the run's background")
        if self.tail_exponent not in (0.0, 2.0, math.inf):
            raise ValueError("tail exponent must be 0, 2 or inf")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def step_ode(self):
        return self.dt_ode or self.dt

    @property
    def record_stride(self):
        return self.record_every or max(1, int(round(0.1 / self.dt)))

    @property
    def closure_stride(self):
        return self.closure_every or self.record_stride

    @property
    def p(self):
        return p_of_q(self.q)

    def closure_radius(self, t):
        return self.initial.N + self.background.W * t + self.closure_margin


@dataclass(eq=False)
class RunState:
    config: SimConfig
    state: DeviationState
    history: FieldHistory
    rho: np.ndarray
    series: list = field(default_factory=list)
    held: np.ndarray = None           # radial mask whose density is held
    held_rho: np.ndarray = None       # density on held shells at held_t
    held_rate: np.ndarray = None      # its rate of change (extrapolation)
    held_t: float = 0.0
    step_index: int = 0
    rho_sup0: float = 0.0
    q_running: float = 0.0
    counters: dict = field(default_factory=lambda: {"domain_exits": 0, "range_violations": 0,
                                                    "range_excursion": 0.0,
                                                    "closure_rejected_shells": 0})
    closures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.state.t

    @property
    def snapshot(self):
        return self.history.snapshots[-1]


def initialize(config, check_audit=True):
    if check_audit and config.audit:
        rep = audit_conditions(config.background, config.initial, config.external,
                               T=max(config.T, 1e-9), q=config.q,
                               n_samples=config.audit_samples, seed=config.seed)
        mode = "III" if config.external.variant == "radial3" else "IV"
        failed = [k for k in ("I", "II", mode) if not rep[k]["pass"]]
        if failed:
            raise ValueError(f"condition audit failed for {failed}")
    grid = config.grid.build()
    R, U, _ = node_coords(grid)
    g0 = config.initial.deviation_reduced(R, U) * np.ones(grid.shape)
    state = DeviationState(0.0, grid, g0)
    rho = compute_density(state)
    snap = RadialFieldSnapshot(0.0, grid.r, rho)
    run = RunState(config, state, FieldHistory([snap], config.external), rho)
    run.rho_sup0 = float(np.max(np.abs(rho)))
    # shells out of reach of the perturbation until the first closure keep
    # their exact initial density (zero), so interpolation noise never
    # enters the field there
    run.held = (grid.r >= config.closure_radius(config.closure_stride * config.dt)) & config.closure
    run.held_rho = np.where(run.held, rho, 0.0)
    run.held_rate = np.zeros_like(rho)
    record(run)
    return run


# ------------------------------------------------------------ stepping


def _advect(run, t_old, t_new, interp):
    """One backward trace of all nodes from t_new to t_old; returns new g."""
    cfg = run.config
    grid = run.state.grid
    R, U, M = node_coords(grid)
    x, v = lift(R.ravel(), U.ravel(), M.ravel())
    bg = cfg.background
    st, _, extras = trace_radial_history(
        run.history, t_new, x, v, t_old, cfg.step_ode,
        source_background=bg if cfg.scheme == "duhamel" else None, compiled=cfg.compiled)
    rf, uf, muf = project(st.X, st.V)
    exits = (uf > grid.u_max * (1 + 1e-12)) & (U.ravel() < grid.u_max)
    g_foot = interp(rf, uf, muf, outside_u=0.0)
    if cfg.scheme == "transport":
        g_new = bg.radial(U.ravel()) - bg.radial(uf) + g_foot
    else:
        g_new = g_foot + extras["source"]
    return g_new.reshape(grid.shape), int(np.count_nonzero(exits))


def _held_value(run, t):
    return run.held_rho + (t - run.held_t) * run.held_rate


def _density(run, g, t):
    rho = np.einsum("ijk,jk->i", g, run.state.grid.velocity_weights())
    return np.where(run.held, _held_value(run, t), rho)


def step(run):
    cfg = run.config
    t_old = run.t
    t_new = (run.step_index + 1) * cfg.dt
    interp = Interpolator(run.state, cfg.tail_exponent)
    hist = run.history

    frozen = RadialFieldSnapshot(t_new, run.snapshot.r, run.snapshot.rho, run.snapshot.m)
    hist.append(frozen)
    g_new, exits = _advect(run, t_old, t_new, interp)
    rho = _density(run, g_new, t_new)
    if cfg.corrector:
        hist.replace_last(RadialFieldSnapshot(t_new, run.state.grid.r, rho))
        g_new, exits = _advect(run, t_old, t_new, interp)
        rho = _density(run, g_new, t_new)
    hist.replace_last(RadialFieldSnapshot(t_new, run.state.grid.r, rho))
    run.state = DeviationState(t_new, run.state.grid, g_new)
    run.rho = rho
    run.step_index += 1
    run.counters["domain_exits"] += exits

    if cfg.closure and run.step_index % cfg.closure_stride == 0:
        closure(run)
    rv = range_violations(run.state, cfg.background, cfg.initial.sup())
    run.counters["range_violations"] += rv["below"] + rv["above"]
    excursion = max(-rv["min_f"], rv["max_f"] - cfg.initial.sup(), 0.0)
    run.counters["range_excursion"] = max(run.counters["range_excursion"], excursion)

    guard = cfg.blowup_factor * max(run.rho_sup0, 1e-10)
    if not np.all(np.isfinite(run.rho)) or np.max(np.abs(run.rho)) > guard:
        raise BlowUp(f"|rho|_inf exceeded the guard {guard:.3g} at t = {t_new:.6g}")
    return run


def closure(run):
    """Exact outer-shell update from the initial data (see module docstring)."""
    cfg = run.config
    grid = run.state.grid
    t = run.t
    shells = np.nonzero(grid.r >= cfg.closure_radius(t))[0]
    if len(shells) == 0 or t == 0:
        return
    R, U, M = node_coords(grid)
    x, v = lift(R[shells], U[shells], M[shells])
    shape = x.shape[:-1]
    st, var, _ = trace_radial_history(run.history, t, x.reshape(-1, 3), v.reshape(-1, 3), 0.0,
                                      cfg.closure_dt_ode or cfg.step_ode, variational=True,
                                      compiled=cfg.compiled)
    dm1 = var.det_B_minus_1().reshape(shape)
    r0 = np.linalg.norm(st.X, axis=-1).reshape(shape)
    u0 = np.linalg.norm(st.V, axis=-1).reshape(shape)
    bg = cfg.background
    F0 = bg.radial(u0)
    g0 = cfg.initial.deviation_reduced(r0, u0)
    w = grid.velocity_weights()
    rho_sh = np.einsum("ijk,jk->i", F0 * dm1 + g0, w)
    ok = np.all(1.0 + dm1 > 0, axis=(1, 2))
    run.counters["closure_rejected_shells"] += int(np.count_nonzero(~ok))
    idx = shells[ok]
    g = run.state.g.copy()
    g[idx] = (bg.radial(U[idx]) - F0[ok] + g0[ok])
    run.state = DeviationState(t, grid, g)
    rho = np.einsum("ijk,jk->i", g, w)
    rho[idx] = rho_sh[ok]
    held = np.zeros(len(grid.r), dtype=bool)
    held[idx] = True
    # replace the extrapolated outer density of the snapshots since the last
    # closure by interpolation between the two closure values
    was = run.held & held
    t_prev = run.held_t
    if t > t_prev and np.any(was):
        rate = (rho - run.held_rho) / (t - t_prev)
        snaps = run.history.snapshots
        for k, snap in enumerate(snaps[:-1]):
            if t_prev + 1e-12 < snap.t < t - 1e-12:
                r_k = snap.rho.copy()
                r_k[was] = run.held_rho[was] + (snap.t - t_prev) * rate[was]
                snaps[k] = RadialFieldSnapshot(snap.t, snap.r, r_k)
    else:
        rate = np.zeros_like(rho)
    # shells the perturbation can reach before the next closure are released
    held &= grid.r >= cfg.closure_radius(t + cfg.closure_stride * cfg.dt)
    run.held = held
    run.held_rho = np.where(held, rho, 0.0)
    run.held_rate = np.where(held & was, rate, 0.0)
    run.held_t = t
    run.rho = rho
    run.history.replace_last(RadialFieldSnapshot(t, grid.r, rho))
    run.closures.append({"t": t, "shells": int(len(idx)),
                         "min_detB": float(np.min(1.0 + dm1))})


def record(run):
    cfg = run.config
    rep = diag.norm_report(run.state, run.rho, run.snapshot, cfg.background, q=cfg.q,
                           window=(cfg.fit_r_lo, cfg.fit_r_hi), floor=cfg.fit_floor,
                           min_points=cfg.fit_min_points)
    run.q_running = max(run.q_running, rep["Q_t"])
    rep["Q_t"] = run.q_running
    rep["closure"] = bool(run.closures and abs(run.closures[-1]["t"] - run.t) < 1e-12)
    run.series.append(rep)
    return rep


def run(config, callback=None):
    """Run to T, recording diagnostics on the record cadence.

    callback(run_state) is called after every recorded step.
    """
    t0 = time.perf_counter()
    rs = initialize(config)
    if callback:
        callback(rs)
    for _ in range(config.n_steps):
        step(rs)
        if rs.step_index % config.record_stride == 0 or rs.step_index == config.n_steps:
            record(rs)
            if callback:
                callback(rs)
    rs.timings["run_seconds"] = time.perf_counter() - t0
    return rs


def with_overrides(config, **kw):
    """Copy of a config with top-level fields replaced."""
    return replace(config, **kw)
