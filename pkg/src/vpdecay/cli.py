"""Command line front end: flat config files, run orchestration, artifacts.

Subcommands
    run        time-step a configuration and write series.csv, snapshot_{k}.csv,
               report.json, timing.json and history.npz
    audit      sample the structural conditions of a configuration
    probe      injectivity probe of v -> V(0) at a point
    cov-check  change-of-variables check at one or more points
    oracle     compare the radial field with direct lattice quadrature

Exit codes: 0 success, 1 validation error, 2 runtime abort (blow-up
guard), 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from .characteristics import FieldHistory, change_of_variables_check, injectivity_probe
from .field import RadialFieldSnapshot, uniform_ball_comparison, write_field_snapshot
from .model import Background, ExternalField, InitialData, Schedule, audit_conditions, p_of_q
from .solver import BlowUp, GridSpec, SimConfig, run as run_solver

SCHEMA_VERSION = 1
CRITERIA = tuple(f"A{i}" for i in range(1, 11))
SERIES_COLUMNS = ("t", "rho_sup", "rho_norm_4", "rho_norm_6", "rho_norm_p", "Q_t", "m_sup",
                  "P_t", "Psi_t", "fit_exponent")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# ------------------------------------------------------------- config

_TOP = [f.name for f in dataclasses.fields(SimConfig)
        if f.name not in ("grid", "background", "initial", "external")]
_GRID = [f.name for f in dataclasses.fields(GridSpec)]
_BG = [f.name for f in dataclasses.fields(Background)]
_INIT = [f.name for f in dataclasses.fields(InitialData) if f.name != "background"]
_EXT = ["variant", "coefficient", "times", "values"]

KNOWN_KEYS = (_TOP + [f"grid.{k}" for k in _GRID] + [f"background.{k}" for k in _BG]
              + [f"initial.{k}" for k in _INIT] + [f"external.{k}" for k in _EXT])


def _defaults():
    cfg = SimConfig()
    flat = {k: getattr(cfg, k) for k in _TOP}
    flat.update({f"grid.{k}": getattr(cfg.grid, k) for k in _GRID})
    flat.update({f"background.{k}": getattr(cfg.background, k) for k in _BG})
    flat.update({f"initial.{k}": getattr(cfg.initial, k) for k in _INIT})
    flat["external.variant"] = cfg.external.variant
    flat["external.coefficient"] = None
    flat["external.times"] = cfg.external.schedule.times
    flat["external.values"] = cfg.external.schedule.values
    return flat


def _convert(key, text, default):
    text = text.strip()
    if key in ("external.times", "external.values"):
        return tuple(float(s) for s in text.split(",") if s.strip())
    if key == "external.coefficient":
        return float(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        val = float(text)
        if val != int(val):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(val)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text):
    """Parse `key = value` lines; returns (SimConfig, {key: line number})."""
    flat = _defaults()
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in flat:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno)
        try:
            flat[key] = _convert(key, value, flat[key])
        except ValueError as exc:
            raise ConfigError(f"type mismatch for {key!r}: {exc}", lineno) from None
        lines[key] = lineno
    return build_config(flat, lines), lines


def build_config(flat, lines=None):
    lines = lines or {}

    def fail(exc, *keys):
        hit = [lines[k] for k in keys if k in lines]
        raise ConfigError(str(exc), max(hit) if hit else None) from None

    if "q" in flat:
        try:
            p_of_q(flat["q"])
        except ValueError as exc:
            fail(exc, "q")
    try:
        grid = GridSpec(**{k: flat[f"grid.{k}"] for k in _GRID})
        grid.build()
    except ValueError as exc:
        fail(exc, *[f"grid.{k}" for k in _GRID])
    try:
        bg = Background(**{k: flat[f"background.{k}"] for k in _BG})
    except ValueError as exc:
        fail(exc, *[f"background.{k}" for k in _BG])
    try:
        init = InitialData(background=bg, **{k: flat[f"initial.{k}"] for k in _INIT})
    except ValueError as exc:
        fail(exc, *[f"initial.{k}" for k in _INIT])
    try:
        if flat.get("external.coefficient") is not None:
            if "external.times" in lines or "external.values" in lines:
                raise ValueError("give either external.coefficient or external.times/values")
            sched = Schedule.constant(flat["external.coefficient"])
        else:
            sched = Schedule(tuple(flat["external.times"]), tuple(flat["external.values"]))
        ext = ExternalField(flat["external.variant"], sched)
    except ValueError as exc:
        fail(exc, *[f"external.{k}" for k in _EXT])
    top = {k: flat[k] for k in _TOP}
    try:
        return SimConfig(grid=grid, background=bg, initial=init, external=ext, **top)
    except ValueError as exc:
        msg = str(exc)
        keys = [k for k in lines if k.split(".")[-1] in msg or k in msg]
        if "multiple" in msg:
            keys += ["T", "dt"]
        if "spherically symmetric" in msg:
            keys += ["external.variant"]
        fail(exc, *keys)


def parse_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    cfg, _ = parse_config_text(text)
    return cfg


def flatten_config(cfg):
    flat = {k: getattr(cfg, k) for k in _TOP}
    flat.update({f"grid.{k}": getattr(cfg.grid, k) for k in _GRID})
    flat.update({f"background.{k}": getattr(cfg.background, k) for k in _BG})
    flat.update({f"initial.{k}": getattr(cfg.initial, k) for k in _INIT})
    flat["external.variant"] = cfg.external.variant
    flat["external.times"] = list(cfg.external.schedule.times)
    flat["external.values"] = list(cfg.external.schedule.values)
    return flat


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def dump_config(cfg):
    """Effective configuration as config-file text (round-trips through parse)."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in flatten_config(cfg).items())


# ------------------------------------------------------------ verdicts


def _v(status, **detail):
    return {"status": status, **detail}


def verdicts_for_run(cfg, rs, monitor):
    """Criteria decidable from a single run; the rest are marked not-run."""
    out = {k: _v("not-run") for k in CRITERIA}
    series = rs.series
    steady = cfg.initial.delta == 0.0 and cfg.external.variant == "none"
    if steady:
        worst = max(s["rho_sup"] for s in series)
        out["A1"] = _v("pass" if worst <= 1e-12 else "fail", max_rho_sup=worst)
        return out
    late = [s for s in series if s["t"] >= 0.5 - 1e-12]
    exps = [s["fit_exponent"] for s in late]
    if cfg.external.variant == "radial3":
        keys = ("rho_norm_4", "m_sup", "P_t")
        ok = bool(late) and all(np.isfinite(e) and e >= 3.7 for e in exps)
        ok = ok and all(monitor[k]["verdict"] == "bounded" for k in keys)
        out["A2"] = _v("pass" if ok else "fail", min_exponent=_nanmin(exps),
                       verdicts={k: monitor[k]["verdict"] for k in keys})
    else:
        ok = bool(late) and all(np.isfinite(e) and e >= 5.5 for e in exps)
        ok = ok and monitor["Psi_t"]["verdict"] == "bounded"
        out["A3"] = _v("pass" if ok else "fail", min_exponent=_nanmin(exps),
                       verdicts={"Psi_t": monitor["Psi_t"]["verdict"]})
    return out


def _nanmin(xs):
    xs = [x for x in xs if np.isfinite(x)]
    return float(min(xs)) if xs else None


# ------------------------------------------------------------ artifacts


class Artifacts:
    """Tracks files written into the output directory so an abort can remove them."""

    def __init__(self, out):
        self.out = Path(out)
        self.created_dir = not self.out.exists()
        self.files = []

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self.files.append(p)
        return p

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(obj), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def cleanup(self):
        for p in self.files:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        if self.created_dir:
            try:
                self.out.rmdir()
            except OSError:
                pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_series(path, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for s in series:
            w.writerow([repr(float(s[c])) for c in SERIES_COLUMNS])


def save_history(path, history):
    snaps = history.snapshots
    ext = history.external
    np.savez(path, times=history.times, r=snaps[0].r,
             rho=np.array([s.rho for s in snaps]), m=np.array([s.m for s in snaps]),
             variant=np.array(ext.variant), sched_times=np.array(ext.schedule.times),
             sched_values=np.array(ext.schedule.values))


def load_history(path):
    with np.load(path) as z:
        ext = ExternalField(str(z["variant"]), Schedule(tuple(z["sched_times"].tolist()),
                                                         tuple(z["sched_values"].tolist())))
        snaps = [RadialFieldSnapshot(float(t), z["r"], rho, m)
                 for t, rho, m in zip(z["times"], z["rho"], z["m"])]
    return FieldHistory(snaps, ext)


def _base_report(command, cfg):
    return {"schema_version": SCHEMA_VERSION, "version": __version__, "command": command,
            "config": flatten_config(cfg) if cfg is not None else None,
            "deterministic": True, "timings": "timing.json",
            "verdicts": {k: _v("not-run") for k in CRITERIA}}


# ----------------------------------------------------------- commands


def cmd_run(args, cfg, art):
    snap_every = cfg.snapshot_every
    t0 = time.perf_counter()

    def on_record(rs):
        if snap_every and rs.step_index % snap_every == 0:
            write_field_snapshot(art.path(f"snapshot_{rs.step_index}.csv"), rs.snapshot)

    rs = run_solver(cfg, callback=on_record)
    write_series(art.path("series.csv"), rs.series)
    save_history(art.path("history.npz"), rs.history)
    keys = ("rho_norm_4", "m_sup", "P_t", "Psi_t", "rho_norm_p")
    monitor = (diag.gronwall_monitor(rs.series, keys=keys, ceiling=cfg.ceiling)
               if len(rs.series) > 1 else {})
    report = _base_report("run", cfg)
    grid = rs.state.grid
    report["grid"] = {"r": grid.r, "u": grid.u, "mu": grid.mu}
    last = rs.series[-1]
    report["summary"] = {
        "final": {k: last[k] for k in SERIES_COLUMNS},
        "fit": last["fit"],
        "monitor": monitor,
        "counters": rs.counters,
        "closures": len(rs.closures),
        "min_closure_detB": min((c["min_detB"] for c in rs.closures), default=None),
        "g_tail_r2_max": max(s["g_tail_r2"] for s in rs.series),
    }
    if monitor:
        report["verdicts"] = verdicts_for_run(cfg, rs, monitor)
    art.write_json("report.json", report)
    art.write_json("timing.json", {"run_seconds": time.perf_counter() - t0, **rs.timings})
    status = {k: v["status"] for k, v in report["verdicts"].items() if v["status"] != "not-run"}
    print(f"run finished at t = {rs.t:g}; verdicts {status or 'none'}")
    return 0


def cmd_audit(args, cfg, art):
    t0 = time.perf_counter()
    rep = audit_conditions(cfg.background, cfg.initial, cfg.external, T=max(cfg.T, 1e-9),
                           q=cfg.q, n_samples=cfg.audit_samples, seed=cfg.seed)
    report = _base_report("audit", cfg)
    report["audit"] = rep
    art.write_json("report.json", report)
    art.write_json("timing.json", {"audit_seconds": time.perf_counter() - t0})
    for key in ("I", "II", "III", "IV"):
        print(f"condition {key}: {'pass' if rep[key]['pass'] else 'fail'}")
    return 0


def _history_for(args, cfg, t):
    if args.history:
        hist = load_history(args.history)
        if t > hist.times[-1] + 1e-9:
            raise ValueError(f"history ends at t = {hist.times[-1]:g} < {t:g}")
        return hist
    if t > cfg.T + 1e-12:
        raise ValueError(f"t = {t:g} exceeds the configured horizon T = {cfg.T:g}")
    sub = dataclasses.replace(cfg, T=t)
    return run_solver(sub).history


def _points(values):
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size % 3 == 0 and arr.size > 1:
        return arr.reshape(-1, 3)
    return np.stack([arr, np.zeros_like(arr), np.zeros_like(arr)], axis=-1)


def cmd_probe(args, cfg, art):
    t = cfg.T if args.t is None else args.t
    hist = _history_for(args, cfg, t)
    t0 = time.perf_counter()
    results = []
    for x in _points(args.x):
        Q = cfg.grid.u_max if args.Q is None else args.Q
        res = injectivity_probe(hist, t, x, args.D, args.samples, args.seed_probe,
                                cfg.step_ode, Q=Q)
        results.append({"x": x, **res})
    report = _base_report("probe", cfg)
    report["probe"] = {"t": t, "D": args.D, "samples": args.samples, "seed": args.seed_probe,
                       "results": results}
    adm = [r for r in results if r["admissible"]]
    if adm:
        ok = all(r["min_ratio"] >= 0.5 for r in adm)
        report["verdicts"]["A10"] = _v("pass" if ok else "fail",
                                       min_ratio=min(r["min_ratio"] for r in adm))
    art.write_json("report.json", report)
    art.write_json("timing.json", {"probe_seconds": time.perf_counter() - t0})
    for r in results:
        print(f"x = {np.asarray(r['x']).tolist()}: min ratio {r['min_ratio']:.6g}, "
              f"min det B {r['min_detB']:.6g}, admissible {r['admissible']}")
    return 0


def cmd_cov_check(args, cfg, art):
    t = cfg.T if args.t is None else args.t
    hist = _history_for(args, cfg, t)
    t0 = time.perf_counter()
    results = []
    for x in _points(args.x):
        res = change_of_variables_check(hist, t, x, cfg.background, cfg.step_ode)
        results.append({"x": x, **res})
    report = _base_report("cov-check", cfg)
    report["cov_check"] = {"t": t, "results": results}
    worst = max(r["relerr"] for r in results)
    report["verdicts"]["A4"] = _v("pass" if worst < 1e-3 else "fail", max_relerr=worst)
    art.write_json("report.json", report)
    art.write_json("timing.json", {"cov_check_seconds": time.perf_counter() - t0})
    for r in results:
        print(f"x = {np.asarray(r['x']).tolist()}: relerr {r['relerr']:.3e}")
    return 0


def cmd_oracle(args, cfg, art):
    t0 = time.perf_counter()
    res = uniform_ball_comparison(args.points, h=args.h)
    report = _base_report("oracle", cfg)
    report["oracle"] = res
    ok = res["interior_relerr"] <= 1e-3 and res["exterior_relerr"] <= 1e-6
    report["verdicts"]["A8"] = _v("pass" if ok else "fail", **res)
    art.write_json("report.json", report)
    art.write_json("timing.json", {"oracle_seconds": time.perf_counter() - t0})
    print(f"lattice vs radial: {res['interior_relerr']:.3e}; exterior: {res['exterior_relerr']:.3e}")
    return 0


COMMANDS = {"run": cmd_run, "audit": cmd_audit, "probe": cmd_probe,
            "cov-check": cmd_cov_check, "oracle": cmd_oracle}


def build_parser():
    ap = argparse.ArgumentParser(prog="vpdecay", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--out", default="./out", help="artifact directory (default ./out)")
    common.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="time-step a configuration")
    sub.add_parser("audit", parents=[common], help="sample the structural conditions")
    for name in ("probe", "cov-check"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--history", help="history.npz from a previous run")
        p.add_argument("--t", type=float, default=None, help="evaluation time (default T)")
        p.add_argument("--x", type=float, nargs="+", required=True,
                       help="radii on the first axis, or flattened 3-vectors")
        if name == "probe":
            p.add_argument("--D", type=float, default=2.0, help="velocity ball radius")
            p.add_argument("--samples", type=int, default=64)
            p.add_argument("--Q", type=float, default=None,
                           help="velocity support bound (default grid.u_max)")
    p = sub.add_parser("oracle", parents=[common])
    p.add_argument("--points", type=int, default=16, help="sample points per axis")
    p.add_argument("--h", type=float, default=1.0 / 16, help="lattice spacing")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command in ("run", "audit") and not args.config:
        print(f"error: --config is required for {args.command}", file=sys.stderr)
        return 1
    if args.threads < 0:
        print("error: --threads must be non-negative", file=sys.stderr)
        return 1
    if args.threads:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        cfg = parse_config(args.config) if args.config else SimConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    args.seed_probe = cfg.seed
    art = Artifacts(args.out)
    try:
        return COMMANDS[args.command](args, cfg, art)
    except BlowUp as exc:
        art.cleanup()
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        art.cleanup()
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        art.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is an aborted run
        art.cleanup()
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
