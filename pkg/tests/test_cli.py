import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vpdecay import cli

SMALL = """\
T = 0.2
dt = 0.05
audit_samples = 256
snapshot_every = 2
grid.n_r = 40
grid.n_u = 12
grid.n_mu = 8
grid.r_max = 200.0
"""
STEADY = SMALL + "initial.delta = 0\nexternal.variant = none\n"


def write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("text, line, fragment", [
    ("T = 1\nbogus = 3\n", 2, "unknown key"),
    ("dt = 0.1\n\ndt = 0.2\n", 3, "duplicate"),
    ("# comment\ngrid.n_r = abc\n", 2, "type mismatch"),
    ("grid.n_r = 12.5\n", 1, "type mismatch"),
    ("corrector = maybe\n", 1, "boolean"),
    ("T\n", 1, "key = value"),
    ("q = 10.0\n", 1, "7 + sqrt(33) = 12.744563"),
    ("T = 0.105\ndt = 0.01\n", 2, "multiple"),
    ("external.variant = swirl4\n", 1, "spherically symmetric"),
    ("initial.delta = 1.5\n", 1, "delta"),
])
def test_config_errors_cite_lines(text, line, fragment):
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config_text(text)
    assert err.value.line == line
    assert fragment in str(err.value)


def test_config_defaults_and_overrides():
    cfg, lines = cli.parse_config_text(STEADY)
    assert cfg.T == 0.2 and cfg.grid.n_r == 40 and cfg.initial.delta == 0.0
    assert cfg.external.variant == "none" and lines["T"] == 1
    cfg, _ = cli.parse_config_text("external.coefficient = 0.3\n")
    assert cfg.external.schedule(1.0) == 0.3


def test_dump_roundtrip():
    cfg, _ = cli.parse_config_text(SMALL + "external.times = 0, 1\nexternal.values = 0.1, 0.2\n")
    again, _ = cli.parse_config_text(cli.dump_config(cfg))
    assert again == cfg


@given(st.floats(0.01, 1.0), st.integers(4, 300), st.booleans())
def test_dump_roundtrip_property(delta_frac, n_r, corrector):
    text = f"initial.delta = {delta_frac * 0.99!r}\ngrid.n_r = {n_r}\ncorrector = {corrector}\n"
    cfg, _ = cli.parse_config_text(text)
    assert cli.parse_config_text(cli.dump_config(cfg))[0] == cfg


def test_missing_config_is_an_io_error(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 3


def test_run_without_config_is_a_validation_error(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exit_code_and_no_artifacts(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", write(tmp_path, "q = 10\n"), "--out", str(out)]) == 1
    assert "line 1" in capsys.readouterr().err
    assert not out.exists()


def test_blowup_exit_code_removes_partial_artifacts(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, SMALL + "blowup_factor = 1e-6\n")
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_bad_seed_and_threads(tmp_path):
    cfg = write(tmp_path, STEADY)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "-1"]) == 1
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "-2"]) == 1


@pytest.fixture(scope="module")
def steady_out(tmp_path_factory):
    d = tmp_path_factory.mktemp("steady")
    cfg = write(d, STEADY)
    assert cli.main(["run", "--config", cfg, "--out", str(d / "a")]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(d / "b")]) == 0
    return d


def test_run_artifacts(steady_out):
    a = steady_out / "a"
    names = sorted(p.name for p in a.iterdir())
    assert names == ["history.npz", "report.json", "series.csv", "snapshot_0.csv", "snapshot_2.csv",
                     "snapshot_4.csv", "timing.json"]
    header = (a / "series.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == cli.SERIES_COLUMNS
    snap = (a / "snapshot_2.csv").read_text().splitlines()[0]
    assert snap == "r,rho,m,E_mag"


def test_report_verdicts(steady_out):
    rep = json.loads((steady_out / "a" / "report.json").read_text())
    assert set(rep["verdicts"]) == {f"A{i}" for i in range(1, 11)}
    assert rep["verdicts"]["A1"]["status"] == "pass"
    assert rep["schema_version"] == cli.SCHEMA_VERSION
    assert rep["config"]["initial.delta"] == 0.0
    assert rep["timings"] == "timing.json"


def test_run_is_byte_deterministic(steady_out):
    for name in ("report.json", "series.csv", "snapshot_4.csv"):
        assert (steady_out / "a" / name).read_bytes() == (steady_out / "b" / name).read_bytes()


def test_history_roundtrip(steady_out):
    h = cli.load_history(steady_out / "a" / "history.npz")
    np.testing.assert_allclose(h.times, [0.0, 0.05, 0.1, 0.15, 0.2])
    assert h.external.variant == "none"


def test_probe_and_cov_check_on_saved_history(steady_out, tmp_path):
    hist = str(steady_out / "a" / "history.npz")
    cfg = write(tmp_path, STEADY)
    out = tmp_path / "p"
    assert cli.main(["probe", "--config", cfg, "--history", hist, "--x", "40",
                     "--samples", "8", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["probe"]["results"][0]["min_ratio"] == pytest.approx(1.0)
    out = tmp_path / "c"
    assert cli.main(["cov-check", "--config", cfg, "--history", hist, "--x", "40", "0", "0",
                     "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdicts"]["A4"]["status"] == "pass"
    assert cli.main(["probe", "--config", cfg, "--history", hist, "--x", "40", "--t", "5",
                     "--out", str(tmp_path / "q")]) == 1


def test_audit_command(tmp_path, capsys):
    out = tmp_path / "a"
    assert cli.main(["audit", "--config", write(tmp_path, SMALL), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["audit"]["III"]["pass"]
    assert "condition III: pass" in capsys.readouterr().out


def test_oracle_command_small(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["oracle", "--points", "4", "--h", "0.125", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["oracle"]["exterior_relerr"] < 1e-6


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "vpdecay", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for name in ("run", "audit", "probe", "cov-check", "oracle"):
        assert name in res.stdout
