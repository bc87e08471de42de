import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad
from scipy.spatial.transform import Rotation
from scipy.special import erf

from vpdecay.field import (Lattice, RadialFieldSnapshot, compute_density, enclosed_charge,
                           envelope, envelope_check, field_at, gauss_oracle, gradient_bound,
                           total_field, write_field_snapshot)
from vpdecay.model import ExternalField, Schedule
from vpdecay.phase_grid import DeviationState, build_grid, node_coords

RHO0 = 3.0 / (4.0 * math.pi)


def ball_snapshot(n_in=2049):
    r = np.concatenate([np.linspace(0.0, 1.0, n_in), np.geomspace(1.0, 1e3, 300)[1:]])
    return RadialFieldSnapshot(0.0, r, np.where(r <= 1.0, RHO0, 0.0), np.minimum(r, 1.0) ** 3)


def ball_density(y):
    return np.where(np.linalg.norm(y, axis=-1) <= 1.0, RHO0, 0.0)


def test_density_of_zero_state():
    grid = build_grid(16, 8, 8, r_max=10.0)
    assert np.all(compute_density(DeviationState(0.0, grid, np.zeros(grid.shape))) == 0.0)


def test_density_of_unit_ball_in_velocity():
    grid = build_grid(16, 9, 8, r_max=10.0, u_max=1.0)
    rho = compute_density(DeviationState(0.0, grid, np.ones(grid.shape)))
    np.testing.assert_allclose(rho, 4 * math.pi / 3, rtol=1e-13)


def test_density_cancels_odd_mu():
    grid = build_grid(16, 9, 8, r_max=10.0, u_max=1.0)
    _, _, M = node_coords(grid)
    rho = compute_density(DeviationState(0.0, grid, M * np.ones(grid.shape)))
    assert np.max(np.abs(rho)) < 1e-14


def test_enclosed_charge_zero_and_origin():
    r = np.linspace(0, 5, 11)
    assert np.all(enclosed_charge(np.zeros_like(r), r) == 0.0)
    assert enclosed_charge(np.ones_like(r), r)[0] == 0.0


def test_enclosed_charge_ball():
    r = np.concatenate([np.linspace(0.0, 1.0, 4001), np.linspace(1.0, 3.0, 101)[1:]])
    m = enclosed_charge(np.where(r < 1.0, RHO0, 0.0), r)
    # the jump costs half a cell of 4 pi r^2 rho0 = 3 at h = 1/4000
    np.testing.assert_allclose(m[r >= 1.0], 1.0, atol=1.5 / 4000 + 1e-9)


def test_ball_charge_monte_carlo_cross_check():
    rng = np.random.default_rng(11)
    y = rng.uniform(-1.0, 1.0, size=(400_000, 3))
    mc = 8.0 * np.mean(ball_density(y))
    assert mc == pytest.approx(1.0, rel=5e-3)


def test_enclosed_charge_gaussian():
    r = np.linspace(0.0, 6.0, 3001)
    m = enclosed_charge(np.exp(-r * r), r)
    closed = math.pi**1.5 * erf(r) - 2 * math.pi * r * np.exp(-r * r)
    for k in (200, 1000, 3000):
        val, _ = quad(lambda s: 4 * math.pi * s * s * math.exp(-s * s), 0.0, r[k])
        assert closed[k] == pytest.approx(val, rel=1e-12)
    np.testing.assert_allclose(m, closed, atol=5e-6)


def test_field_at_origin_and_ball_exterior():
    snap = ball_snapshot()
    np.testing.assert_array_equal(field_at(snap, [0.0, 0, 0]), 0.0)
    np.testing.assert_allclose(field_at(snap, [2.0, 0, 0]), [0.25, 0, 0], rtol=1e-12)
    r = np.geomspace(1.5, 900, 40)
    h, _ = snap.radial(r)
    np.testing.assert_allclose(h * r * r, 1.0, rtol=1e-12)


def test_field_interior_of_ball_is_linear():
    snap = ball_snapshot()
    r = np.linspace(0.05, 0.95, 19)
    h, dh = snap.radial(r)
    np.testing.assert_allclose(h, r, rtol=1e-6)
    np.testing.assert_allclose(snap.density_at(r), RHO0, rtol=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2**32 - 1))
def test_field_rotation_equivariance(x, seed):
    snap = ball_snapshot(257)
    U = Rotation.random(random_state=seed).as_matrix()
    x = np.array(x)
    np.testing.assert_allclose(field_at(snap, U @ x), U @ field_at(snap, x), atol=1e-14)


def test_jacobian_matches_fd():
    snap = ball_snapshot()
    x = np.random.default_rng(2).normal(size=(8, 3)) * 3
    h = 1e-6
    fd = np.stack([(field_at(snap, x + h * e) - field_at(snap, x - h * e)) / (2 * h)
                   for e in np.eye(3)], -1)
    np.testing.assert_allclose(snap.jacobian(x), fd, atol=1e-6)


def test_total_field_superposition():
    snap = ball_snapshot()
    zero = RadialFieldSnapshot(0.0, snap.r, np.zeros_like(snap.r))
    r3 = ExternalField("radial3", Schedule.constant(1.0))
    sw = ExternalField("swirl4", Schedule.constant(0.3))
    x = np.random.default_rng(5).normal(size=(10, 3)) * 2
    np.testing.assert_array_equal(total_field(snap, ExternalField(), 0.0, x), field_at(snap, x))
    np.testing.assert_array_equal(total_field(zero, r3, 0.0, x), r3(0.0, x))
    r = np.linalg.norm(x, axis=-1)
    E_ball = np.where(r <= 1, 1.0, r**-3)[:, None] * x
    np.testing.assert_allclose(total_field(snap, sw, 0.0, x), E_ball + sw(0.0, x),
                               atol=1e-12)


def test_gauss_oracle_zero_density():
    lat = Lattice(-1.0, 0.25, 8)
    E, info = gauss_oracle(np.zeros((8, 8, 8)), lat, [[0.3, 0.1, 0.2]])
    np.testing.assert_array_equal(E, 0.0)
    assert info["truncation_estimate"] == 0.0


@pytest.fixture(scope="module")
def ball_lattice():
    h = 1.0 / 16
    n = 34
    lat = Lattice(-n * h / 2, h, n)
    dens, where = lat.cell_moments(ball_density, sub=8)
    return lat, dens, where


def test_gauss_oracle_ball_exterior(ball_lattice):
    lat, dens, where = ball_lattice
    E, _ = gauss_oracle(dens, lat, [[2.0, 0, 0]], positions=where)
    np.testing.assert_allclose(E[0], [0.25, 0, 0], atol=2.5e-4)


def test_gauss_oracle_multipole_limit(ball_lattice):
    lat, dens, where = ball_lattice
    total = float(np.sum(dens)) * lat.h**3
    x = np.array([[10.0, 0, 0], [0, 20.0, 0], [0, 0, 40.0]])
    E, _ = gauss_oracle(dens, lat, x, positions=where)
    scaled = np.linalg.norm(E, axis=-1) * np.linalg.norm(x, axis=-1) ** 2
    np.testing.assert_allclose(scaled, total, rtol=1e-4)
    assert abs(scaled[2] - total) <= abs(scaled[0] - total) + 1e-15


def test_gauss_oracle_requires_odd_subdivision(ball_lattice):
    lat, dens, _ = ball_lattice
    with pytest.raises(ValueError):
        gauss_oracle(dens, lat, [[0.1, 0, 0]], density=ball_density, sub=4)


def test_envelope_checks():
    assert envelope(1.0) == 1.0
    assert envelope(1 - 1e-12) == pytest.approx(1.0) and envelope(1 + 1e-12) == pytest.approx(1.0)
    snap = ball_snapshot()
    zero = RadialFieldSnapshot(0.0, snap.r, np.zeros_like(snap.r))
    assert envelope_check(zero) == {"sup_E_over_G": 0.0, "sup_E_r2_tail": 0.0}
    assert envelope_check(snap)["sup_E_r2_tail"] == pytest.approx(1.0, rel=1e-12)
    assert np.isfinite(gradient_bound(snap)["max_grad_E_r2"])


def test_snapshot_validation_and_dump(tmp_path):
    with pytest.raises(ValueError):
        RadialFieldSnapshot(0.0, [0.5, 1.0, 2.0], [0.0, 0.0, 0.0])
    snap = ball_snapshot(65)
    write_field_snapshot(tmp_path / "f.csv", snap)
    assert open(tmp_path / "f.csv").readline().strip() == "r,rho,m,E_mag"
    rows = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 0], snap.r)
