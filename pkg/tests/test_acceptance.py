"""Acceptance criteria A1 to A10.

Each test prints one line "A<n> PASS|FAIL: ..." and then asserts.  The three
full-size runs (steady, radial3, no external field) are session fixtures and
take several minutes together.  Evaluation points are fixed here, before the
numbers are looked at:

  A4   t = 1, five points at 1.1, 1.5, 2, 3, 5 times the admissibility radius
  A5   t = 1, three phase points, dt_ode = 1e-3 (bound) and 0.1 -> 0.025 (order)
  A6   t = 1, eps in {1e-3, 1e-4}, dt_ode = 1e-3
  A7   t = 1, |x| = 10 and 20, three velocities
  A9   t = T = 2, s = 0, |x| = 32 and 64
  A10  t = 1, D = 2, 64 samples, seed 7, |x| = 1.2 C_D
"""
import numpy as np
import pytest

from vpdecay import diagnostics as diag
from vpdecay import solver
from vpdecay.characteristics import (ZeroField, admissibility_radius, change_of_variables_check,
                                     det_B_expansion, injectivity_probe, trace_back,
                                     trace_variational)
from vpdecay.cli import verdicts_for_run
from vpdecay.field import uniform_ball_comparison
from vpdecay.model import Background, ExternalField, InitialData
from vpdecay.solver import SimConfig

MONITOR_KEYS = ("rho_norm_4", "m_sup", "P_t", "Psi_t", "rho_norm_p")
X3 = np.array([[0.5, 0.2, 0.1], [1.5, 0.0, 0.3], [3.0, 1.0, 0.0]])
V3 = np.array([[0.3, -0.2, 0.4], [0.1, 0.5, 0.0], [-0.5, 0.2, 0.2]])


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{name}: {detail}"


def _run(cfg):
    rs = solver.run(cfg)
    monitor = diag.gronwall_monitor(rs.series, keys=MONITOR_KEYS, ceiling=cfg.ceiling)
    return rs, monitor, verdicts_for_run(cfg, rs, monitor)


@pytest.fixture(scope="session")
def steady_run():
    cfg = SimConfig(T=1.0, dt=0.01, initial=InitialData(delta=0.0), external=ExternalField(),
                    record_every=1)
    return _run(cfg)


@pytest.fixture(scope="session")
def radial3_run():
    return _run(SimConfig())


@pytest.fixture(scope="session")
def free_run():
    return _run(SimConfig(external=ExternalField()))


def test_A1_steady_state(steady_run, capsys):
    rs, _, v = steady_run
    worst = max(s["rho_sup"] for s in rs.series)
    verdict(capsys, "A1", worst <= 1e-12 and v["A1"]["status"] == "pass",
            f"max_t |rho|_inf = {worst:.3e} over {len(rs.series)} records (<= 1e-12)")


def test_A2_decay_condition_III(radial3_run, capsys):
    rs, mon, v = radial3_run
    late = [s["fit_exponent"] for s in rs.series if s["t"] >= 0.5 - 1e-12]
    verd = {k: mon[k]["verdict"] for k in ("rho_norm_4", "m_sup", "P_t")}
    ok = all(np.isfinite(late)) and min(late) >= 3.7 and set(verd.values()) == {"bounded"}
    verdict(capsys, "A2", ok and v["A2"]["status"] == "pass",
            f"min exponent for t >= 0.5 = {np.nanmin(late):.4f} (>= 3.7); verdicts {verd}")


def test_A3_decay_condition_IV(free_run, capsys):
    rs, mon, v = free_run
    late = [s["fit_exponent"] for s in rs.series if s["t"] >= 0.5 - 1e-12]
    fits = [s["fit"].get("error", "") for s in rs.series if s["t"] >= 0.5 - 1e-12]
    usable = [e for e in late if np.isfinite(e)]
    ok = len(usable) == len(late) and min(late) >= 5.5 and mon["Psi_t"]["verdict"] == "bounded"
    detail = (f"min exponent = {min(usable):.4f}" if usable
              else f"no usable fit ({fits[-1]})")
    verdict(capsys, "A3", ok and v["A3"]["status"] == "pass",
            f"{detail} (>= 5.5); Psi_t {mon['Psi_t']['verdict']}")


def test_A4_change_of_variables(free_run, capsys):
    hist = free_run[0].history
    bg = Background()
    adm = admissibility_radius(hist, 1.0, 1.5, 1.5)
    d = np.array([1.0, 0.3, -0.2]) / np.sqrt(1.13)
    errs = [change_of_variables_check(hist, 1.0, k * adm["C_D"] * d, bg, 0.02)["relerr"]
            for k in (1.1, 1.5, 2.0, 3.0, 5.0)]
    zero = change_of_variables_check(ZeroField(), 1.0, [50.0, 0, 0], bg, 0.02)["relerr"]
    verdict(capsys, "A4", max(errs) < 1e-3 and zero < 1e-9,
            f"max relerr {max(errs):.3e} at C_D = {adm['C_D']:.3f} (< 1e-3); "
            f"zero field {zero:.3e} (< 1e-9)")


def test_A5_liouville(free_run, capsys):
    hist = free_run[0].history
    t = 1.0
    _, var, _ = trace_back(hist, t, X3, V3, 0.0, 1e-3, j6=True)
    fine = float(np.max(np.abs(var.det_J6() - 1.0))) / t
    dev = {}
    for h in (0.1, 0.025):
        _, var, _ = trace_back(hist, t, X3, V3, 0.0, h, j6=True)
        dev[h] = float(np.max(np.abs(var.det_J6() - 1.0)))
    ratio = dev[0.025] / dev[0.1]
    verdict(capsys, "A5", fine <= 1e-8 and ratio <= 0.25,
            f"|det J6 - 1| per unit time {fine:.3e} at dt_ode 1e-3 (<= 1e-8); "
            f"two halvings from 0.1 scale it by {ratio:.3e} (<= 1/4)")


def test_A6_jacobian_oracle(free_run, capsys):
    hist = free_run[0].history
    x, v = X3[0], V3[0]
    _, var = trace_variational(hist, 1.0, x, v, 0.0, 1e-3)

    def flow_V(vv):
        return trace_back(hist, 1.0, np.broadcast_to(x, vv.shape), vv, 0.0, 1e-3)[0].V

    errs = []
    for eps in (1e-3, 1e-4):
        E = np.eye(3) * eps
        fd = ((flow_V(v + E) - flow_V(v - E)) / (2 * eps)).T
        errs.append(float(np.max(np.abs(fd - var.B_mat))))
    ratio = errs[0] / errs[1]
    verdict(capsys, "A6", 25.0 <= ratio <= 400.0 and errs[1] < 1e-6,
            f"errors {errs[0]:.3e}, {errs[1]:.3e}; ratio {ratio:.1f} (eps^2 -> 100, "
            f"accepted [25, 400])")


def test_A7_detB_residual_scaling(free_run, capsys):
    hist = free_run[0].history
    res = []
    for r in (10.0, 20.0):
        x = np.broadcast_to([r, 0.0, 0.0], V3.shape)
        res.append(det_B_expansion(hist, 1.0, x, V3, 0.02)["residual"])
    ratio = res[1] / res[0]
    lo, hi = 2.0**-6 / 4, 2.0**-6 * 4
    ok = bool(np.all((ratio >= lo) & (ratio <= hi)))
    verdict(capsys, "A7", ok, f"residual ratios r=20 vs 10: {np.round(ratio, 5).tolist()} "
                              f"(2^-6 = {2.0**-6:.5f}, band [{lo:.5f}, {hi:.5f}])")


def test_A8_field_oracle(capsys):
    res = uniform_ball_comparison(16)
    ok = res["interior_relerr"] <= 1e-3 and res["exterior_relerr"] <= 1e-6
    verdict(capsys, "A8", ok,
            f"{res['points']} points: lattice vs radial {res['interior_relerr']:.3e} (<= 1e-3); "
            f"exterior vs m/r^2 {res['exterior_relerr']:.3e} (<= 1e-6)")


def test_A9_decomposition(radial3_run, capsys):
    hist = radial3_run[0].history
    bg = Background()
    d = {r: diag.field_integral_decomposition(hist, 2.0, [r, 0, 0], bg, 0.02, s=0.0, Q=1.5)
         for r in (32.0, 64.0)}
    III = max(abs(d[r]["III"]) for r in d)
    rI = d[64.0]["I"] / d[32.0]["I"]
    rII = d[64.0]["II"] / d[32.0]["II"]
    lo, hi = 2.0**-4 / 4, 2.0**-4 * 4
    ok = III <= 1e-8 and lo <= rI <= hi and lo <= rII <= hi
    verdict(capsys, "A9", ok, f"|III| {III:.2e} (<= 1e-8); I ratio {rI:.5f}, II ratio {rII:.5f} "
                              f"(2^-4 band [{lo:.5f}, {hi:.5f}])")


def test_A10_injectivity(free_run, capsys):
    hist = free_run[0].history
    CD = admissibility_radius(hist, 1.0, 2.0, 1.5)["C_D"]
    rep = injectivity_probe(hist, 1.0, [1.2 * CD, 0, 0], 2.0, 64, 7, 0.02, Q=1.5)
    ok = rep["admissible"] and rep["min_ratio"] >= 0.5 and rep["min_detB"] > 0
    verdict(capsys, "A10", ok, f"|x| = {1.2 * CD:.3f}: min ratio {rep['min_ratio']:.6f} (>= 1/2), "
                               f"min det B {rep['min_detB']:.6f}")
