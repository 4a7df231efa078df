"""Command-line driver.

``splitjko run CONFIG [--out DIR] [--quiet]`` runs what the config asks for
(single run, h-sweep or assumption check); ``sweep`` and
``check-assumptions`` force the corresponding mode. Exit codes: 0 all
checks passed, 1 a diagnostic check failed, 2 configuration error,
3 solver failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import helmholtz as hz
from . import jko as jk
from . import ot
from . import scenarios as scn
from . import scheme as sh
from . import transport as tr
from .config import ConfigError, RunConfig, compile_expression, parse_config, validate
from .measures import Domain, GridMeasure, check_energy_assumptions, entropy, linear, power, write_snapshot

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
SOLVER_ERRORS = (sh.SchemeError, tr.TransportError, ot.OTError, jk.JKOError, FloatingPointError,
                 np.linalg.LinAlgError)


class Writer:
    """Single sink for every emitted file; keeps the checksums for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.files = {}

    def _record(self, rel):
        data = (self.root / rel).read_bytes()
        self.files[rel] = hashlib.sha256(data).hexdigest()

    def text(self, rel, content):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
        self._record(rel)
        return rel

    def snapshot(self, rel, rho, t):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_snapshot(path, rho, t)
        self._record(rel)
        return rel

    def dat(self, rel, columns, comment=None):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        dg.write_dat(columns, path, comment)
        self._record(rel)
        return rel

    def manifest(self, body):
        body = dict(body)
        body["files"] = dict(sorted(self.files.items()))
        path = self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dg.to_json(body))


# --- scenario assembly -------------------------------------------------------------------


def _custom(c: dict):
    if c["dim"] == 1:
        dom = Domain.interval(c["lo"], c["hi"], c["cells"], boundary=c["boundary"])
        names = ("x",)
    else:
        dom = Domain.square(c["lo"], c["hi"], c["cells"], boundary=c["boundary"])
        names = ("x", "y")
    dens = compile_expression(c["density"], names)
    rho0 = GridMeasure.from_function(dom, dens)
    energy = {"entropy": entropy, "linear": linear}.get(c["energy"], lambda: power(c["m"]))()
    kind = c["drift"]
    if kind == "zero":
        drift = hz.zero_drift()
    elif kind == "rotation":
        drift = hz.rotation(c["omega"])
    elif kind == "external":
        drift = hz.external(compile_expression(c["potential"], names))
    else:
        k = c["strength"]
        drift = hz.interaction(lambda *d: tuple(k * di for di in d))
    return scn.Scenario("custom", dom, rho0, energy, drift)


def build_scenario(cfg: RunConfig):
    """Preset or custom scenario; ``two-species`` returns the system dict."""
    try:
        if cfg.scenario == "two-species":
            return scn.two_species(**cfg.scenario_params)
        if cfg.scenario == "custom":
            return _custom(cfg.custom)
        return scn.PRESETS[cfg.scenario](**cfg.scenario_params)
    except (ValueError, TypeError) as exc:
        key = next(iter(cfg.scenario_params), None)
        raise ConfigError(f"scenario {cfg.scenario!r} rejected its parameters: {exc}", key=key,
                          line=cfg.line_of("scenario", key), path=cfg.path) from None


def scheme_config(cfg: RunConfig, energy, drift, h=None, h0=None) -> sh.SchemeConfig:
    s = cfg.scheme
    return sh.SchemeConfig(h=s["h"] if h is None else h, T=s["T"], energy=energy, drift=drift,
                           backend=s["backend"], tol=s["tol"], max_iter=s["max_iter"], eps=s["epsilon"],
                           transport_only=s["transport_only"], snapshot_stride=s["snapshot_stride"],
                           substeps=s["substeps"], velocity_order=s["velocity_order"],
                           density_order=s["density_order"], remap=s["remap"], h0=s["h0"] if h0 is None else h0,
                           semiconvexity=s["semiconvexity"], step_distances=s["step_distances"])


def resolve_h0(cfg: RunConfig, scenario) -> float | None:
    """Step cap ``1/(2 lambda)`` from the measured semiconvexity of ``V[rho0]``
    when the config sets neither ``h0`` nor ``semiconvexity``."""
    s = cfg.scheme
    if s["h0"] is not None or s["semiconvexity"] is not None or isinstance(scenario, dict):
        return s["h0"]
    if scenario.drift is None or scenario.drift.kind == "zero":
        return None
    lam = hz.check_drift_assumptions(scenario.drift, [scenario.rho0]).semiconvexity
    return 1.0 / (2.0 * lam) if lam > 1e-10 else None


# --- checks -------------------------------------------------------------------------------


def _check(name, value, limit, ok):
    return {"name": name, "value": value, "limit": limit, "pass": bool(ok)}


def _probe_steps(steps, count):
    """Up to ``count`` stored steps, evenly spread and always ending at the last."""
    steps = sorted(steps)
    if len(steps) <= count:
        return steps
    idx = np.unique(np.round(np.linspace(len(steps) - 1, 0, count)).astype(int))
    return [steps[i] for i in idx]


def run_checks(cfg: RunConfig, traj: sh.SchemeTrajectory, oracle=None) -> tuple[list, dict]:
    checks, summary = [], {}
    c = cfg.checks
    mass = max(abs(r.mass() - 1.0) for r in traj.rho.values())
    checks.append(_check("mass", mass, c["mass_tolerance"], mass <= c["mass_tolerance"]))
    drift = [abs(r.get("energy_transport_change", 0.0)) for r in traj.records]
    summary["max_transport_energy_change"] = max(drift) if drift else 0.0
    summary["cumulative_transport_energy_change"] = abs(sum(r.get("energy_transport_change", 0.0)
                                                            for r in traj.records))
    if c["energy_tolerance"] is not None:
        v = summary["max_transport_energy_change"]
        checks.append(_check("transport_energy_step", v, c["energy_tolerance"], v <= c["energy_tolerance"]))
    if c["cumulative_energy_tolerance"] is not None:
        v = summary["cumulative_transport_energy_change"]
        checks.append(_check("transport_energy_cumulative", v, c["cumulative_energy_tolerance"],
                             v <= c["cumulative_energy_tolerance"]))
    summary["fallbacks"] = sum(bool(r.get("fallback", False)) for r in traj.records)
    gaps = [r["gap"] for r in traj.records if "gap" in r]
    summary["max_gap"] = max(gaps) if gaps else 0.0
    if oracle is not None:
        errs = {}
        for k in _probe_steps(traj.rho, cfg.oracle_probes):
            errs[k] = dg.w2(traj.rho[k], oracle(k * traj.h))
        summary["oracle_error"] = [{"step": k, "t": k * traj.h, "w2": v} for k, v in errs.items()]
        sup = max(errs.values())
        summary["oracle_sup_error"] = sup
        if c["max_error"] is not None:
            checks.append(_check("oracle_error", sup, c["max_error"], sup <= c["max_error"]))
    return checks, summary


# --- commands -----------------------------------------------------------------------------


def _say(quiet, *args):
    if not quiet:
        print(*args, file=sys.stderr)


def _progress(quiet):
    if quiet:
        return None
    marks = set()

    def report(k, N, recs):
        mark = (10 * k) // N
        if mark not in marks or k == N:
            marks.add(mark)
            r = recs[0]
            extra = f" E={r['energy']:.6g}" if "energy" in r else ""
            print(f"  step {k}/{N} t={r['t']:.6g}{extra}", file=sys.stderr)

    return report


def _emit_trajectory(w: Writer, traj, prefix, snapshots):
    rels = [w.text(f"{prefix}diagnostics.csv", dg.to_csv(traj.records))]
    if snapshots:
        for k in sorted(traj.rho):
            rels.append(w.snapshot(f"{prefix}snapshots/rho_{k:06d}.txt", traj.rho[k], k * traj.h))
    return rels


def _base_manifest(cfg, command, extra=None):
    body = {"tool": "splitjko", "version": __version__, "command": command, "config": cfg.as_dict()}
    body.update(extra or {})
    return body


def cmd_single(cfg: RunConfig, w: Writer, quiet: bool) -> int:
    scen = build_scenario(cfg)
    h0 = resolve_h0(cfg, scen)
    echo = {"h0_resolved": h0}
    if h0 is not None and cfg.scheme["h"] > h0:
        raise cfg.error(f"h={cfg.scheme['h']} exceeds the step cap h0={h0:.6g}", "scheme", "h")
    if isinstance(scen, dict):
        base = scheme_config(cfg, None, None)
        trajs = sh.run_scheme_system(scen["rho0"], scen["coupling"], scen["energies"], base,
                                     progress=_progress(quiet))
        checks, summaries, emitted = [], [], []
        for i, traj in enumerate(trajs):
            ci, si = run_checks(cfg, traj)
            checks += [dict(c, species=i) for c in ci]
            summaries.append(si)
            emitted += _emit_trajectory(w, traj, f"species{i}/", cfg.snapshots)
        records = [t.records for t in trajs]
        summary = {"species": summaries}
    else:
        traj = sh.run_scheme(scen.rho0, scheme_config(cfg, scen.energy, scen.drift, h0=h0), progress=_progress(quiet))
        checks, summary = run_checks(cfg, traj, scen.oracle)
        emitted = _emit_trajectory(w, traj, "", cfg.snapshots)
        records = traj.records
    ok = all(c["pass"] for c in checks)
    report = {"checks": checks, "summary": summary, "status": "pass" if ok else "fail"}
    w.text("report.json", dg.to_json(report))
    code = EXIT_OK if ok else EXIT_FAIL
    w.manifest(_base_manifest(cfg, "run", {"resolved": echo, "records": records, "checks": checks,
                                           "status": report["status"], "exit_code": code,
                                           "snapshots": [e for e in emitted if "snapshots/" in e]}))
    for c in checks:
        _say(quiet, f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['value']:.3e} (limit {c['limit']:.3e})")
    return code


def cmd_sweep(cfg: RunConfig, w: Writer, quiet: bool) -> int:
    scen = build_scenario(cfg)
    sw = cfg.sweep
    if sw["reference"] == "analytic" and scen.oracle is None:
        raise cfg.error(f"scenario {cfg.scenario!r} has no analytic oracle; use reference = finest",
                        "sweep", "reference")
    h0 = resolve_h0(cfg, scen)
    if h0 is not None and max(sw["hs"]) > h0:
        raise cfg.error(f"step {max(sw['hs'])} exceeds the step cap h0={h0:.6g}", "sweep", "hs")
    make = lambda h: scheme_config(cfg, scen.energy, scen.drift, h=h, h0=h0)
    hs = sorted(sw["hs"], reverse=True)
    for h in hs:
        make(h)  # validate every step before running any
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {h: pool.submit(sh.run_scheme, scen.rho0, make(h)) for h in hs}
        trajs = {h: futures[h].result() for h in hs}
    for h in hs:
        _say(quiet, f"  h={h:g}: {trajs[h].steps} steps")
    study = dg.convergence_study(scen.rho0, make, hs, reference=sw["reference"], oracle=scen.oracle,
                                 agreement=sw["agreement"], trajectories=trajs)
    fit = study["fit"]
    checks = [
        _check("order", study["order"], sw["min_order"], study["order"] >= sw["min_order"]),
        _check("r2", fit["r2"], sw["min_r2"], fit["r2"] >= sw["min_r2"]),
    ]
    if sw["require_monotone"]:
        checks.append(_check("monotone", float(study["monotone"]), 1.0, study["monotone"]))
    for h in hs:
        w.text(f"runs/h_{h!r}/diagnostics.csv", dg.to_csv(trajs[h].records))
    w.text("sweep.csv", dg.to_csv(study["rows"]))
    w.dat("sweep.dat", {"h": [r["h"] for r in study["rows"]], "error": [r["error"] for r in study["rows"]]},
          comment=f"fitted order {study['order']:.6g}")
    ok = all(c["pass"] for c in checks)
    report = {"rows": study["rows"], "fit": fit, "order": study["order"], "monotone": study["monotone"],
              "reference": sw["reference"], "checks": checks, "status": "pass" if ok else "fail"}
    w.text("report.json", dg.to_json(report))
    code = EXIT_OK if ok else EXIT_FAIL
    w.manifest(_base_manifest(cfg, "sweep", {"resolved": {"h0_resolved": h0}, "rows": study["rows"],
                                             "checks": checks, "status": report["status"], "exit_code": code}))
    for r in study["rows"]:
        _say(quiet, f"h={r['h']:g}  sup W2 error={r['error']:.4e}")
    for c in checks:
        _say(quiet, f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['value']:.4g} (limit {c['limit']:.4g})")
    return code


def _probes(rho0: GridMeasure):
    u = GridMeasure.uniform(rho0.domain)
    return [rho0, rho0.mix(u, 0.3), rho0.mix(u, 0.6)]


def cmd_check(cfg: RunConfig, w: Writer, quiet: bool) -> int:
    scen = build_scenario(cfg)
    checks, reports = [], {}
    if isinstance(scen, dict):
        energies = scen["energies"]
        drifts = [(f"species{i}", (m for m in row if m is not None), scen["rho0"][i])
                  for i, row in enumerate(scen["coupling"])]
    else:
        energies = [scen.energy]
        drifts = [("drift", [scen.drift], scen.rho0)]
    for i, E in enumerate(energies):
        rep = check_energy_assumptions(E)
        reports[f"energy{i}"] = {"name": E.name, "convex": rep.convex, "superlinear": rep.superlinear,
                                 "pressure_constant": rep.pressure_constant, "violations": rep.violations}
        checks.append(_check(f"energy{i}", float(len(rep.violations)), 0.0, rep.ok))
    h = cfg.scheme["h"]
    for name, models, rho in drifts:
        models = list(models)
        model = models[0] if len(models) == 1 else sum(models[1:], models[0]) if models else hz.zero_drift()
        rep = hz.check_drift_assumptions(model, _probes(rho))
        reports[name] = rep.as_dict()
        lam = rep.semiconvexity
        cap = 1.0 / (2.0 * lam) if lam > 1e-10 else math.inf
        reports[name]["h_cap"] = cap
        checks.append(_check(f"{name}_step_cap", h, cap, h < cap))
        finite = all(math.isfinite(v) for v in rep.as_dict().values())
        checks.append(_check(f"{name}_finite_constants", float(finite), 1.0, finite))
    ok = all(c["pass"] for c in checks)
    w.text("assumptions.json", dg.to_json({"reports": reports, "checks": checks}))
    code = EXIT_OK if ok else EXIT_FAIL
    w.manifest(_base_manifest(cfg, "check-assumptions", {"checks": checks, "status": "pass" if ok else "fail",
                                                         "exit_code": code}))
    for c in checks:
        _say(quiet, f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['value']:.4g} (limit {c['limit']:.4g})")
    return code


COMMANDS = {"single": cmd_single, "sweep": cmd_sweep, "check": cmd_check}


def _failure(status, code, exc, **extra):
    rec = {"status": status, "exit_code": code, "error": str(exc)}
    rec.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return rec


def execute(config_path, command: str, out=None, quiet=False) -> int:
    try:
        cfg = parse_config(config_path)
    except ConfigError as exc:
        _failure("config-error", EXIT_CONFIG, exc, key=exc.key, line=exc.line)
        return EXIT_CONFIG
    mode = {"run": cfg.mode, "sweep": "sweep", "check-assumptions": "check"}[command]
    if mode != cfg.mode:
        cfg.mode = mode
        try:
            validate(cfg)
        except ConfigError as exc:
            _failure("config-error", EXIT_CONFIG, exc, key=exc.key, line=exc.line)
            return EXIT_CONFIG
    w = Writer(out if out is not None else cfg.output)
    _say(quiet, f"splitjko {__version__}: {cfg.scenario} ({mode}) -> {w.root}")
    try:
        return COMMANDS[mode](cfg, w, quiet)
    except ConfigError as exc:
        _failure("config-error", EXIT_CONFIG, exc, key=exc.key, line=exc.line)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        rec = _failure("solver-failure", EXIT_SOLVER, exc, step=getattr(exc, "step", None))
        w.manifest(_base_manifest(cfg, command, {"failure": rec, "status": "solver-failure",
                                                 "exit_code": EXIT_SOLVER}))
        return EXIT_SOLVER


def build_parser():
    p = argparse.ArgumentParser(prog="splitjko", description="Splitting transport-JKO solver")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the study the config describes"),
                       ("sweep", "h-refinement study"),
                       ("check-assumptions", "check energy and drift hypotheses")):
        q = sub.add_parser(name, help=text)
        q.add_argument("config", help="configuration file")
        q.add_argument("--out", help="output directory (overrides [run] output)")
        q.add_argument("--quiet", action="store_true", help="no progress output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return execute(args.config, args.command, args.out, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
