"""Run configuration: one ``key = value`` file with sections.

Values are Python literals (``ast.literal_eval``); bare words such as
``heat`` or ``cubic`` are read as strings, and the expression keys of the
``[custom]`` section are kept verbatim. Unknown sections and keys are
rejected with the closest valid name as a suggestion.
"""
from __future__ import annotations

import ast
import configparser
import difflib
import inspect
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENARIOS = ("heat", "porous-medium", "aggregation-diffusion", "rotation-transport", "mixed-drift",
             "two-species", "custom", "stationary-gaussian", "drifted-heat")
MODES = ("single", "sweep", "check")


class ConfigError(ValueError):
    """Invalid configuration; carries the offending key and line when known."""

    def __init__(self, msg, key=None, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + (f"[{key}] " if key else "") + msg)
        self.key = key
        self.line = line


# (default, kind) per key; kinds are checked by _coerce
SCHEMA = {
    "run": {
        "scenario": ("heat", "str"),
        "mode": ("single", "str"),
        "output": ("out", "str"),
        "workers": (1, "int"),
        "snapshots": (True, "bool"),
        "oracle_probes": (5, "int"),
    },
    "scheme": {
        "h": (1e-2, "float"),
        "T": (0.25, "float"),
        "backend": ("auto", "str"),
        "tol": (1e-7, "float"),
        "max_iter": (5000, "int"),
        "epsilon": (None, "opt_float"),
        "transport_only": (False, "bool"),
        "snapshot_stride": (1, "int"),
        "substeps": (None, "opt_int"),
        "velocity_order": (1, "int"),
        "density_order": (3, "int"),
        "remap": ("cubic", "str"),
        "h0": (None, "opt_float"),
        "semiconvexity": (None, "opt_float"),
        "step_distances": (True, "bool"),
    },
    "scenario": {},  # preset keyword arguments, checked against the preset signature
    "sweep": {
        "hs": (None, "floatlist"),
        "reference": ("analytic", "str"),
        "min_order": (0.5, "float"),
        "min_r2": (0.95, "float"),
        "require_monotone": (True, "bool"),
        "agreement": (True, "bool"),
    },
    "checks": {
        "mass_tolerance": (1e-9, "float"),
        "energy_tolerance": (None, "opt_float"),
        "cumulative_energy_tolerance": (None, "opt_float"),
        "max_error": (None, "opt_float"),
    },
    "custom": {
        "dim": (1, "int"),
        "lo": (-4.0, "float"),
        "hi": (4.0, "float"),
        "cells": (128, "int"),
        "boundary": ("noflux", "str"),
        "density": ("exp(-x**2 / 2)", "expr"),
        "energy": ("entropy", "str"),
        "m": (2.0, "float"),
        "drift": ("zero", "str"),
        "omega": (1.0, "float"),
        "potential": ("0.5 * x**2", "expr"),
        "strength": (1.0, "float"),
    },
}

CHOICES = {
    ("run", "scenario"): SCENARIOS,
    ("run", "mode"): MODES,
    ("scheme", "backend"): ("auto", "quantile", "entropic"),
    ("scheme", "remap"): ("linear", "cubic", "quintic"),
    ("sweep", "reference"): ("analytic", "finest"),
    ("custom", "boundary"): ("noflux", "periodic"),
    ("custom", "energy"): ("entropy", "power", "linear"),
    ("custom", "drift"): ("zero", "rotation", "external", "interaction"),
}

_BARE = re.compile(r"^[A-Za-z_][\w\-.]*$")


# --- safe expressions for [custom] ----------------------------------------------------

_FUNCS = {name: getattr(np, name) for name in
          ("exp", "log", "sqrt", "sin", "cos", "tan", "tanh", "cosh", "sinh", "abs", "where", "maximum",
           "minimum", "clip", "arctan2")}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Compare,
          ast.operator, ast.unaryop, ast.cmpop, ast.Tuple)


def compile_expression(text: str, variables=("x",)):
    """Compile an arithmetic expression in ``variables`` using a fixed set of
    numpy functions. Attribute access, subscripts and other names are refused."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse expression {text!r}: {exc.msg}") from None
    allowed = set(variables) | set(_FUNCS) | set(_CONSTS)
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ValueError(f"expression {text!r}: {type(node).__name__} not allowed")
        if isinstance(node, ast.Name) and node.id not in allowed:
            raise ValueError(f"expression {text!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ValueError(f"expression {text!r}: only {sorted(_FUNCS)} may be called")
    code = compile(tree, "<config>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def fn(*xs):
        out = eval(code, env, dict(zip(variables, xs)))  # noqa: S307 - names whitelisted above
        return np.broadcast_to(np.asarray(out, float), np.shape(xs[0])).copy()

    return fn


# --- parsing -----------------------------------------------------------------------------


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` for every assignment in the file."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        m = re.match(r"^([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            out[(section, m.group(1).strip())] = i
    return out


def _literal(raw: str):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        if _BARE.match(raw):
            return raw
        raise


def _coerce(value, kind):
    if kind in ("opt_float", "opt_int") and value is None:
        return None
    if kind in ("float", "opt_float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if kind in ("int", "opt_int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return int(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise TypeError("expected True or False")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if kind == "floatlist":
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) for v in value):
            raise TypeError("expected a list of numbers")
        return [float(v) for v in value]
    return value


def _suggest(name, options):
    close = difflib.get_close_matches(name, list(options), n=1, cutoff=0.6)
    return f"; did you mean {close[0]!r}?" if close else ""


@dataclass
class RunConfig:
    """Resolved configuration of one CLI invocation."""

    scenario: str
    mode: str
    output: str
    workers: int
    snapshots: bool
    oracle_probes: int
    scheme: dict
    scenario_params: dict
    sweep: dict
    checks: dict
    custom: dict
    path: str | None = None
    lines: dict = field(default_factory=dict, repr=False)

    def line_of(self, section, key=None):
        return self.lines.get((section, key))

    def error(self, msg, section, key=None):
        return ConfigError(msg, key=key, line=self.line_of(section, key), path=self.path)

    def as_dict(self) -> dict:
        """Echo of every resolved value (defaults included)."""
        return {
            "run": {"scenario": self.scenario, "mode": self.mode, "output": self.output, "workers": self.workers,
                    "snapshots": self.snapshots, "oracle_probes": self.oracle_probes},
            "scheme": dict(self.scheme),
            "scenario": dict(self.scenario_params),
            "sweep": dict(self.sweep),
            "checks": dict(self.checks),
            "custom": dict(self.custom) if self.scenario == "custom" else {},
        }


def parse_text(text: str, path: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r}", key=exc.option, line=exc.lineno, path=path) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno, path=path) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("assignment before any [section] header", line=exc.lineno, path=path) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line (expected 'key = value')", line=line, path=path) from None
    lines = _key_lines(text)
    values = {sec: {k: d for k, (d, _) in keys.items()} for sec, keys in SCHEMA.items()}
    values["scenario"] = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]{_suggest(sec, SCHEMA)}", line=lines.get((sec, None)),
                              path=path)
        for key, raw in parser.items(sec):
            line = lines.get((sec, key))
            if sec != "scenario" and key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]{_suggest(key, SCHEMA[sec])}", key=key,
                                  line=line, path=path)
            kind = "any" if sec == "scenario" else SCHEMA[sec][key][1]
            if kind == "expr":
                values[sec][key] = raw.strip().strip("\"'")
                continue
            try:
                val = _coerce(_literal(raw), kind)
            except (ValueError, SyntaxError):
                raise ConfigError(f"value {raw.strip()!r} is not a literal", key=key, line=line,
                                  path=path) from None
            except TypeError as exc:
                raise ConfigError(f"{exc} (got {raw.strip()!r})", key=key, line=line, path=path) from None
            values[sec][key] = val
    run = values["run"]
    cfg = RunConfig(scenario=run["scenario"], mode=run["mode"], output=run["output"], workers=run["workers"],
                    snapshots=run["snapshots"], oracle_probes=run["oracle_probes"], scheme=values["scheme"],
                    scenario_params=values["scenario"], sweep=values["sweep"], checks=values["checks"],
                    custom=values["custom"], path=path, lines=lines)
    validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a configuration file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(p)) from None
    return parse_text(text, str(p))


def _preset_signature(name):
    from . import scenarios

    if name == "two-species":
        return inspect.signature(scenarios.two_species)
    if name == "custom":
        return None
    return inspect.signature(scenarios.PRESETS[name])


def validate(cfg: RunConfig) -> None:
    """Semantic checks; each error names the offending key."""
    for (sec, key), options in CHOICES.items():
        val = getattr(cfg, key) if sec == "run" else getattr(cfg, sec)[key]
        if val not in options:
            raise cfg.error(f"{val!r} is not one of {', '.join(options)}{_suggest(str(val), options)}", sec, key)
    s = cfg.scheme
    for key in ("h", "T", "tol"):
        if not (s[key] > 0 and math.isfinite(s[key])):
            raise cfg.error(f"{key} must be positive (got {s[key]!r})", "scheme", key)
    for key in ("max_iter", "snapshot_stride"):
        if s[key] < 1:
            raise cfg.error(f"{key} must be at least 1", "scheme", key)
    if s["epsilon"] is not None and not s["epsilon"] > 0:
        raise cfg.error("epsilon must be positive", "scheme", "epsilon")
    if s["substeps"] is not None and s["substeps"] < 1:
        raise cfg.error("substeps must be at least 1", "scheme", "substeps")
    if s["velocity_order"] not in (1, 3):
        raise cfg.error("velocity_order must be 1 or 3", "scheme", "velocity_order")
    if s["density_order"] not in (1, 3):
        raise cfg.error("density_order must be 1 or 3", "scheme", "density_order")
    if s["h0"] is not None and s["h"] > s["h0"]:
        raise cfg.error(f"h={s['h']} exceeds h0={s['h0']}", "scheme", "h")
    if s["semiconvexity"] is not None and s["semiconvexity"] > 0 and s["h"] >= 1 / (2 * s["semiconvexity"]):
        raise cfg.error(f"h={s['h']} violates h < 1/(2 semiconvexity)", "scheme", "h")
    if cfg.workers < 1:
        raise cfg.error("workers must be at least 1", "run", "workers")
    if cfg.oracle_probes < 1:
        raise cfg.error("oracle_probes must be at least 1", "run", "oracle_probes")
    sig = _preset_signature(cfg.scenario)
    if sig is not None:
        for key in cfg.scenario_params:
            if key not in sig.parameters:
                raise cfg.error(f"scenario {cfg.scenario!r} has no parameter {key!r}"
                                f"{_suggest(key, sig.parameters)}", "scenario", key)
    elif cfg.scenario_params:
        key = next(iter(cfg.scenario_params))
        raise cfg.error("custom scenarios take their settings from [custom]", "scenario", key)
    if cfg.scenario == "custom":
        c = cfg.custom
        if c["dim"] not in (1, 2):
            raise cfg.error("dim must be 1 or 2", "custom", "dim")
        if not c["hi"] > c["lo"]:
            raise cfg.error("hi must exceed lo", "custom", "hi")
        if c["cells"] < 4:
            raise cfg.error("cells must be at least 4", "custom", "cells")
        names = ("x",) if c["dim"] == 1 else ("x", "y")
        for key in ("density", "potential"):
            try:
                compile_expression(c[key], names)
            except ValueError as exc:
                raise cfg.error(str(exc), "custom", key) from None
        if c["drift"] == "rotation" and c["dim"] != 2:
            raise cfg.error("rotation drift needs dim = 2", "custom", "drift")
        if c["energy"] == "power" and not c["m"] > 1:
            raise cfg.error("power energy needs m > 1", "custom", "m")
    w = cfg.sweep
    if cfg.mode == "sweep":
        if w["hs"] is None or len(w["hs"]) < 3:
            raise cfg.error("a sweep needs at least three step sizes", "sweep", "hs")
        if any(not h > 0 for h in w["hs"]):
            raise cfg.error("step sizes must be positive", "sweep", "hs")
        if cfg.scenario == "two-species":
            raise cfg.error("sweeps run single-species scenarios only", "run", "scenario")
    for key, val in cfg.checks.items():
        if val is not None and not val > 0:
            raise cfg.error(f"{key} must be positive", "checks", key)
