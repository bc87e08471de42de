import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from vpdecay.characteristics import FieldHistory
from vpdecay.field import RadialFieldSnapshot
from vpdecay.model import Background, ExternalField, InitialData, Schedule
from vpdecay.phase_grid import Interpolator, lift, node_coords, project
from vpdecay import solver
from vpdecay.solver import BlowUp, GridSpec, SimConfig

SMALL = GridSpec(n_r=40, n_u=12, n_mu=8, r_max=200.0, u_max=1.5)


def small(**kw):
    base = dict(T=0.2, dt=0.05, grid=SMALL, audit_samples=256)
    base.update(kw)
    return SimConfig(**base)


def steady(**kw):
    return small(initial=InitialData(delta=0.0), external=ExternalField(), **kw)


def test_steady_initial_state_is_zero():
    rs = solver.initialize(steady())
    assert np.all(rs.state.g == 0.0) and np.all(rs.rho == 0.0)
    assert np.all(rs.snapshot.m == 0.0)


def test_default_initial_deviation_vanishes_outside_N():
    rs = solver.initialize(small())
    R, _, _ = node_coords(rs.state.grid)
    assert np.all(rs.state.g[R >= 1.0] == 0.0)
    bound = 4 * math.pi / 3 * 1.0 * 0.5
    assert np.max(np.abs(rs.rho)) <= bound


def test_steady_run_is_a_fixed_point():
    rs = solver.run(steady(T=0.5, dt=0.05))
    assert max(s["rho_sup"] for s in rs.series) <= 1e-12
    assert np.max(np.abs(rs.state.g)) <= 1e-12


def test_zero_horizon_records_only_initial_state():
    rs = solver.run(small(T=0.0))
    assert len(rs.series) == 1 and rs.series[0]["t"] == 0.0


def test_free_streaming_step_with_frozen_zero_field():
    cfg = small(external=ExternalField(), closure=False)
    rs = solver.initialize(cfg)
    r = rs.state.grid.r
    zero = RadialFieldSnapshot(0.0, r, np.zeros_like(r))
    rs.history = FieldHistory([zero, RadialFieldSnapshot(0.05, r, np.zeros_like(r))],
                              cfg.external)
    g_new, exits = solver._advect(rs, 0.0, 0.05, Interpolator(rs.state))
    R, U, M = node_coords(rs.state.grid)
    x, v = lift(R, U, M)
    exact = cfg.initial.deviation_reduced(np.linalg.norm(x - 0.05 * v, axis=-1), U)
    assert exits == 0
    assert np.max(np.abs(g_new - exact)) < 2e-3


def test_transport_and_duhamel_converge():
    diffs = []
    for dt in (0.05, 0.025):
        a = solver.run(small(T=0.1, dt=dt, closure=False))
        b = solver.run(small(T=0.1, dt=dt, closure=False, scheme="duhamel"))
        diffs.append(np.max(np.abs(a.state.g - b.state.g)))
    assert diffs[1] < diffs[0]


def test_run_is_deterministic():
    a = solver.run(small())
    b = solver.run(small())
    assert [s["rho_sup"] for s in a.series] == [s["rho_sup"] for s in b.series]
    np.testing.assert_array_equal(a.state.g, b.state.g)


def test_running_velocity_support_nondecreasing():
    rs = solver.run(small(T=0.3))
    q = [s["Q_t"] for s in rs.series]
    assert all(b >= a for a, b in zip(q, q[1:]))
    assert q[0] >= 1.0


def test_history_stamps_are_step_times():
    rs = solver.run(small())
    np.testing.assert_allclose(rs.history.times, np.arange(5) * 0.05, atol=1e-12)


def test_blowup_guard():
    with pytest.raises(BlowUp):
        solver.run(small(blowup_factor=1e-6))


@pytest.mark.parametrize("kw", [
    dict(T=0.13, dt=0.05),
    dict(dt=0.0),
    dict(T=-1.0),
    dict(dt_ode=0.1),
    dict(scheme="spectral"),
    dict(q=10.0),
    dict(external=ExternalField("swirl4", Schedule.constant(0.1))),
    dict(grid=GridSpec(r_max=0.5)),
    dict(tail_exponent=3.0),
    dict(initial=InitialData(background=Background(W=2.0))),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small(**kw)


def test_with_overrides():
    cfg = solver.with_overrides(small(), T=0.1)
    assert cfg.T == 0.1 and cfg.n_steps == 2


@given(st.floats(0.1, 100.0), st.floats(0.0, 1.5), st.floats(-1.0, 1.0),
       st.integers(0, 2**32 - 1))
def test_reduced_coordinates_commute_with_rotation(r, u, mu, seed):
    U = Rotation.random(random_state=seed).as_matrix()
    x, v = lift(r, u, mu)
    a = np.array(project(x, v))
    b = np.array(project(U @ x, U @ v))
    np.testing.assert_allclose(a, b, atol=1e-9)
