"""Command-line experiment driver.

Configs are YAML (or JSON) files with a versioned schema; unknown keys are
errors. Every data file is a deterministic function of (config, seed); wall
clock and timestamps live only in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from datetime import datetime, timezone
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import __version__
from .drift_bounds import (InfeasibleError, NegativeDriftParams, bound_brownian_interval_sup,
                           bound_brownian_reverse_sup, bound_d1_reverse_sup, bound_levy_interval_sup,
                           bound_levy_reverse_sup, estimate_interval_sup_tail, estimate_reverse_sup_tail,
                           solve_level)
from .measures import (MIN_ENSEMBLE, SEGMENT_SUP_NORM, VALUE, MeasureError, boundedness_profile,
                       extinction_probability, mean_bound_check, segment_time_average,
                       stationarity_check, tightness_diagnostic, time_average_distribution)
from .models import (FeedbackSpec, ModelError, NoiseCoupling, Nonlinearity, PiecewiseConstant,
                     f_at_zero, leading_real_root, log_frame_coefficients, original_frame_coefficients,
                     steady_states, sup_f, zero_stability, eval_f)
from .noise import JumpLaw, NoiseSpecError, RegulatedLevySpec, stream
from .paths import PathError, Segment, write_path_csv
from .pathwise_bounds import (BoundParams, BoundPreconditionError, forcing_path, verify_lower_bound,
                              verify_upper_bound)
from .solver import ConfigError, SolverConfig, SolverError, simulate_ensemble, transform_exp

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ACCEPTANCE = 3
EXIT_RUNTIME = 4

_REQUIRED = object()

SCHEMA = {
    "schema_version": _REQUIRED,
    "model": {
        "nonlinearity": {"kind": "mackey_glass", "p": 2.0, "q": 0.0},
        "gamma": 1.0,
        "r": 2.0,
        "tau": 1.0,
        "frame": "log",
    },
    "coupling": {"c": 0.2, "correction": "ito_brownian"},
    "noise": {"sigma": 1.0, "lambda_N": 0.0, "jump_law": {"kind": "point_mass", "value": 0.0},
              "drift_mode": "no_continuous_drift"},
    "solver": {"dt": 0.01, "horizon": 10.0, "explosion_threshold": 1e8},
    "ensemble": {"n_paths": 1, "master_seed": 0,
                 "initial": {"kind": "constant", "value": 1.0, "low": 0.5, "high": 1.5},
                 "probe_times": None},
    "outputs": {"dir": "out", "trajectories": True},
    "mean_bound": {"enabled": False, "n_sigma": 4.0},
    "tails": {"n_paths": 1000, "dt": 1e-3, "n_workers": 1, "cells": []},
    "invariant": {"windows": None, "stride": 1, "segment_stride": None, "n_boot": 200,
                  "extinction_threshold": 1e-3, "extinction_paths": None, "extinction_horizon": None,
                  "explosion_cap": 0.01, "R_grid": [1.0, 2.0, 5.0, 10.0], "delta_grid": None,
                  "eps": 0.1, "t_grid": None},
    "bounds": {"R": [0.5, 1.0, 2.0], "t0": 0.0},
}

# keys whose value is a free-form mapping or list validated elsewhere
_OPAQUE = {("model", "nonlinearity"), ("model", "gamma"), ("model", "r"), ("noise", "jump_law"),
           ("ensemble", "initial"), ("tails", "cells")}

CELL_KEYS = {"name", "kind", "alpha", "beta", "sigma", "lambda_N", "jump_law", "drift_mode", "l", "T",
             "t0", "kappa2", "R", "target"}
CELL_KINDS = ("brownian_reverse", "brownian_interval", "levy_reverse", "levy_interval", "d2_reverse")


class ValidationError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


# --- config handling -------------------------------------------------------------

def load_config(path: str) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValidationError(["config root must be a mapping"])
    return data


def _merge(schema, data, prefix, errors):
    out = {}
    for k in data:
        if k not in schema:
            errors.append(f"unknown key {'.'.join(prefix + (k,))}")
    for k, default in schema.items():
        path = prefix + (k,)
        if isinstance(default, dict) and path not in _OPAQUE:
            sub = data.get(k, {})
            if not isinstance(sub, dict):
                errors.append(f"{'.'.join(path)} must be a mapping")
                sub = {}
            out[k] = _merge(default, sub, path, errors)
        elif k in data:
            out[k] = copy.deepcopy(data[k])
        elif default is _REQUIRED:
            errors.append(f"missing required key {'.'.join(path)}")
        else:
            out[k] = copy.deepcopy(default)
    return out


def normalize_config(data: dict) -> dict:
    """Fill defaults and reject unknown keys; raises ValidationError listing every problem."""
    errors: List[str] = []
    cfg = _merge(SCHEMA, data, (), errors)
    if "schema_version" in data and data["schema_version"] != SCHEMA_VERSION:
        errors.append(f"schema_version must be {SCHEMA_VERSION}, got {data['schema_version']!r}")
    if errors:
        raise ValidationError(errors)
    return cfg


def apply_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError([f"--set expects key.path=value, got {item!r}"])
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValidationError([f"unknown key {key}"])
            node = node[p]
        if parts[-1] not in node:
            raise ValidationError([f"unknown key {key}"])
        node[parts[-1]] = yaml.safe_load(raw)
    if getattr(args, "seed", None) is not None:
        cfg["ensemble"]["master_seed"] = args.seed
    if getattr(args, "n_paths", None) is not None:
        cfg["ensemble"]["n_paths"] = args.n_paths
    if getattr(args, "out", None) is not None:
        cfg["outputs"]["dir"] = args.out
    return cfg


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form; independent of key order and of the
    output directory."""
    cfg = {**cfg, "outputs": {k: v for k, v in cfg.get("outputs", {}).items() if k != "dir"}}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# --- descriptors -> objects --------------------------------------------------------

def _rate(desc, name):
    if isinstance(desc, (int, float)) and not isinstance(desc, bool):
        return PiecewiseConstant.constant(float(desc))
    if isinstance(desc, dict) and set(desc) <= {"breaks", "values"}:
        return PiecewiseConstant(tuple(desc.get("breaks", ())), tuple(desc["values"]))
    raise ModelError(f"model.{name} must be a number or {{breaks, values}}")


def build_nonlinearity(desc) -> Nonlinearity:
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ModelError("model.nonlinearity needs a kind")
    kind = desc["kind"]
    extra = set(desc) - {"kind", "p", "q"}
    if extra:
        raise ModelError(f"unknown key(s) in model.nonlinearity: {sorted(extra)}")
    if kind == "mackey_glass":
        return Nonlinearity.mackey_glass(float(desc.get("p", 2.0)), float(desc.get("q", 0.0)))
    if kind == "nicholson":
        return Nonlinearity.nicholson(float(desc.get("p", 1.0)))
    raise ModelError(f"unknown nonlinearity kind {kind!r}")


def build_model(cfg) -> FeedbackSpec:
    m = cfg["model"]
    return FeedbackSpec(build_nonlinearity(m["nonlinearity"]), _rate(m["gamma"], "gamma"),
                        _rate(m["r"], "r"), float(m["tau"]), m["frame"])


def build_jump_law(desc) -> JumpLaw:
    if not isinstance(desc, dict) or "kind" not in desc:
        raise NoiseSpecError("jump_law needs a kind")
    kind = desc["kind"]
    if kind == "point_mass":
        return JumpLaw.point_mass(float(desc.get("value", 0.0)))
    if kind == "uniform":
        return JumpLaw.uniform(float(desc["zeta"]))
    if kind == "two_point":
        return JumpLaw.two_point(float(desc["zeta"]))
    raise NoiseSpecError(f"unknown jump law kind {kind!r}")


def build_noise(desc) -> RegulatedLevySpec:
    return RegulatedLevySpec(float(desc["sigma"]), float(desc["lambda_N"]), build_jump_law(desc["jump_law"]),
                             drift_mode=desc["drift_mode"])


def build_coupling(cfg) -> NoiseCoupling:
    c = cfg["coupling"]
    return NoiseCoupling(float(c["c"]), correction=c["correction"])


def build_solver(cfg) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(float(s["dt"]), float(s["horizon"]), float(s["explosion_threshold"]))


def initial_segments(cfg, spec: FeedbackSpec, n: int, seed: int) -> List[Segment]:
    """Initial data in the model's own coordinates (log of the population in the log frame)."""
    d = cfg["ensemble"]["initial"]
    kind = d.get("kind", "constant")
    extra = set(d) - {"kind", "value", "low", "high"}
    if extra:
        raise ConfigError(f"unknown key(s) in ensemble.initial: {sorted(extra)}")
    out = []
    for i in range(n):
        if kind == "constant":
            x = float(d.get("value", 1.0))
        elif kind == "random_constant":
            lo, hi = float(d["low"]), float(d["high"])
            x = lo + (hi - lo) * stream(seed, i, "initial").random()
        else:
            raise ConfigError(f"unknown initial kind {kind!r}")
        if spec.frame == "log":
            if not x > 0:
                raise ConfigError("log-frame initial data must be positive populations")
            x = math.log(x)
        elif x < 0:
            raise ConfigError("original-frame initial data must be non-negative")
        out.append(Segment.constant(x, spec.tau))
    return out


def _check_cell(i, cell, errors):
    if not isinstance(cell, dict):
        errors.append(f"tails.cells[{i}] must be a mapping")
        return
    extra = set(cell) - CELL_KEYS
    if extra:
        errors.append(f"unknown key(s) in tails.cells[{i}]: {sorted(extra)}")
    if cell.get("kind") not in CELL_KINDS:
        errors.append(f"tails.cells[{i}].kind must be one of {CELL_KINDS}")
    if ("R" in cell) == ("target" in cell):
        errors.append(f"tails.cells[{i}] needs exactly one of R or target")
    horizon_key = "T" if str(cell.get("kind", "")).endswith("interval") else "l"
    if horizon_key not in cell:
        errors.append(f"tails.cells[{i}] needs {horizon_key}")


def validate(cfg, subcommand: str) -> dict:
    """Build every descriptor once; collect all failures before any simulation."""
    errors: List[str] = []
    objs = {}
    steps = (("model", lambda: build_model(cfg)), ("coupling", lambda: build_coupling(cfg)),
             ("noise", lambda: build_noise(cfg["noise"])), ("solver", lambda: build_solver(cfg)))
    for name, fn in steps:
        try:
            objs[name] = fn()
        except (ModelError, NoiseSpecError, ConfigError, ValueError, KeyError, TypeError) as e:
            errors.append(f"{name}: {e}")
    if "model" in objs and "solver" in objs:
        try:
            objs["solver"].check_model(objs["model"].tau)
        except ConfigError as e:
            errors.append(f"solver: {e}")
        h, dt = objs["solver"].horizon, objs["solver"].dt
        if abs(round(h / dt) * dt - h) > 1e-9 * h:
            errors.append("solver: horizon must be an integer multiple of dt")
    ens = cfg["ensemble"]
    if not (isinstance(ens["n_paths"], int) and ens["n_paths"] >= 0):
        errors.append("ensemble: n_paths must be a non-negative integer")
    if not (isinstance(ens["master_seed"], int) and ens["master_seed"] >= 0):
        errors.append("ensemble: master_seed must be a non-negative integer")
    if "model" in objs:
        try:
            initial_segments(cfg, objs["model"], 1, 0)
        except (ConfigError, KeyError, ValueError) as e:
            errors.append(f"ensemble.initial: {e}")
    if "model" in objs and "coupling" in objs and "noise" in objs:
        c = objs["coupling"]
        if objs["noise"].lambda_N > 0 and c.correction == "ito_brownian":
            errors.append("coupling: jump-driven noise needs correction levy_finite_intensity or none")
    if subcommand == "tails":
        t = cfg["tails"]
        if not (isinstance(t["n_paths"], int) and t["n_paths"] > 0):
            errors.append("tails: n_paths must be a positive integer")
        if not (isinstance(t["dt"], (int, float)) and t["dt"] > 0):
            errors.append("tails: dt must be positive")
        if not isinstance(t["cells"], list):
            errors.append("tails: cells must be a list")
        else:
            for i, cell in enumerate(t["cells"]):
                _check_cell(i, cell, errors)
    if subcommand == "invariant" and "solver" in objs and "model" in objs:
        w = cfg["invariant"]["windows"]
        if w is not None:
            try:
                (a1, b1), (a2, b2) = sorted(tuple(map(float, x)) for x in w)
                if a2 < b1:
                    errors.append("invariant: window overlap")
                if a1 < 0 or b2 > objs["solver"].horizon or a1 >= b1 or a2 >= b2:
                    errors.append("invariant: windows must be non-empty and inside [0, horizon]")
            except (TypeError, ValueError):
                errors.append("invariant: windows must be two [start, end] pairs")
    if subcommand in ("bounds-verify",) and "model" in objs and objs["model"].frame != "log":
        errors.append("bounds: pathwise bounds are checked on log-frame models (model.frame = log)")
    if subcommand == "ensemble" and cfg["mean_bound"]["enabled"] and "model" in objs:
        if objs["model"].frame != "original":
            errors.append("mean_bound: needs an original-frame model")
    if errors:
        raise ValidationError(errors)
    return objs


# --- output helpers --------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


class Outputs:
    def __init__(self, root: str):
        self.root = root
        self.files: List[str] = []
        os.makedirs(root, exist_ok=True)

    def path(self, rel: str) -> str:
        full = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(full) or self.root, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return full

    def csv(self, rel: str, header: List[str], rows) -> None:
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(r.get(h) if isinstance(r, dict) else r[i]) for i, h in enumerate(header)])

    def jsonl(self, rel: str, records) -> None:
        with open(self.path(rel), "w") as fh:
            for rec in records:
                fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")

    def trajectory(self, rel: str, traj) -> None:
        with open(self.path(rel), "w", newline="") as fh:
            write_path_csv(traj.path, fh)

    def manifest(self, cfg, subcommand, exit_code, t_start, counts) -> None:
        entries = []
        for rel in sorted(self.files):
            with open(os.path.join(self.root, rel), "rb") as fh:
                data = fh.read()
            entries.append({"file": rel, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        man = {"schema_version": SCHEMA_VERSION, "toolkit_version": __version__, "subcommand": subcommand,
               "config_hash": config_hash(cfg), "config": cfg, "exit_code": exit_code, "files": entries,
               "paths": counts, "wall_clock_s": time.time() - t_start,
               "created": datetime.now(timezone.utc).isoformat()}
        with open(os.path.join(self.root, "manifest.json"), "w") as fh:
            json.dump(_jsonable(man), fh, sort_keys=True, indent=1)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# --- simulation plumbing --------------------------------------------------------------

def coefficients(spec: FeedbackSpec, coupling: NoiseCoupling, levy: RegulatedLevySpec, threshold: float):
    if spec.frame == "log":
        return log_frame_coefficients(spec, coupling, levy, threshold)
    return original_frame_coefficients(spec, coupling)


def run_paths(cfg, objs, n_paths: int, horizon: Optional[float] = None, seed: Optional[int] = None):
    spec, coupling, levy, solver = objs["model"], objs["coupling"], objs["noise"], objs["solver"]
    seed = cfg["ensemble"]["master_seed"] if seed is None else seed
    horizon = solver.horizon if horizon is None else horizon
    init = initial_segments(cfg, spec, n_paths, seed)
    coeffs = coefficients(spec, coupling, levy, solver.explosion_threshold)
    return simulate_ensemble(coeffs, init, levy, horizon, solver.dt, seed, n_paths,
                             solver.explosion_threshold)


def original_coordinates(trajs, spec: FeedbackSpec):
    return [transform_exp(t) for t in trajs] if spec.frame == "log" else list(trajs)


def _explosion_record(i, tr):
    return {"path": i, "explosion_time": tr.explosion_time, "n_violations": tr.n_violations,
            "n_jumps": int(tr.path.jump_index.size)}


# --- subcommands -----------------------------------------------------------------------

def run_simulate(cfg, objs, out: Outputs, args) -> int:
    n = cfg["ensemble"]["n_paths"]
    trajs = run_paths(cfg, objs, n) if n else []
    if cfg["outputs"]["trajectories"]:
        for i, tr in enumerate(trajs):
            out.trajectory(f"trajectories/path_{i:05d}.csv", tr)
    if trajs:
        out.jsonl("simulate.jsonl", [_explosion_record(i, t) for i, t in enumerate(trajs)])
    out.counts = {"simulated": n}
    return EXIT_OK


def _probe_times(cfg, horizon):
    pt = cfg["ensemble"]["probe_times"]
    return np.linspace(0.0, horizon, 11) if pt is None else np.asarray(pt, float)


def run_ensemble(cfg, objs, out: Outputs, args) -> int:
    spec = objs["model"]
    n = cfg["ensemble"]["n_paths"]
    out.counts = {"simulated": n}
    if n == 0:
        return EXIT_OK
    trajs = original_coordinates(run_paths(cfg, objs, n), spec)
    probes = _probe_times(cfg, objs["solver"].horizon)
    X = np.array([[float(tr.path.value_at(t)) for t in probes] for tr in trajs])
    rows = []
    for j, t in enumerate(probes):
        col = X[:, j]
        rows.append({"t": t, "mean": col.mean(), "sd": col.std(ddof=1) if n > 1 else 0.0,
                     "q05": np.quantile(col, 0.05), "q50": np.quantile(col, 0.5), "q95": np.quantile(col, 0.95),
                     "n": n})
    out.csv("ensemble_summary.csv", ["t", "mean", "sd", "q05", "q50", "q95", "n"], rows)
    out.jsonl("ensemble.jsonl", [_explosion_record(i, t) for i, t in enumerate(trajs)])
    code = EXIT_OK
    if n >= MIN_ENSEMBLE:
        prof = boundedness_profile(trajs, VALUE, cfg["invariant"]["R_grid"], probes)
        out.csv("boundedness.csv", ["quantity", "t", "R", "exceedance", "n"], prof.rows())
    if cfg["mean_bound"]["enabled"]:
        res = mean_bound_check(trajs, spec, probes, n_sigma=cfg["mean_bound"]["n_sigma"])
        out.csv("mean_bound.csv", ["t", "mean", "se", "xi", "limit"], res.rows())
        out.jsonl("mean_bound.jsonl", [{"ok": res.ok, "negative_fraction": res.negative_fraction,
                                        "limit": res.limit, "tail_from": res.tail_from}])
        if not res.ok:
            code = EXIT_ACCEPTANCE
    return code


class Const:
    """Picklable constant coefficient for the tail estimators."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, t):
        return np.full(np.shape(t), self.value)


def _cell_levy(cell, brownian: bool) -> RegulatedLevySpec:
    if brownian:
        return RegulatedLevySpec.brownian(1.0)
    return RegulatedLevySpec(float(cell.get("sigma", 1.0)), float(cell.get("lambda_N", 0.0)),
                             build_jump_law(cell.get("jump_law", {"kind": "point_mass", "value": 0.0})),
                             drift_mode=cell.get("drift_mode", "no_continuous_drift"))


def tail_cell(cell: dict, n_paths: int, dt: float, seed: int, n_workers: int = 1) -> dict:
    """Evaluate one containment cell; returns a row with status pass/fail/skipped."""
    kind = cell["kind"]
    row = {"name": cell.get("name", kind), "kind": kind, "n_paths": n_paths, "dt": dt, "seed": seed}
    alpha = float(cell.get("alpha", 0.0))
    beta = float(cell.get("beta", 1.0))
    brownian = kind in ("brownian_reverse", "brownian_interval", "d2_reverse")
    try:
        levy = _cell_levy(cell, brownian)
    except NoiseSpecError as e:
        return {**row, "status": "skipped", "reason": f"noise: {e}"}
    row.update(alpha=alpha, beta=beta, sigma=levy.sigma, lambda_N=levy.lambda_N, zeta=levy.zeta)
    reverse = kind.endswith("reverse")
    horizon = float(cell["l"] if reverse else cell["T"])
    row["horizon"] = horizon
    try:
        if kind == "brownian_reverse":
            bound = lambda R: bound_brownian_reverse_sup(alpha, beta, R)
        elif kind == "d2_reverse":
            bound = lambda R: bound_d1_reverse_sup(alpha, beta, R)
        elif kind == "brownian_interval":
            bound = lambda R: bound_brownian_interval_sup(beta, horizon, R)
        else:
            # the interval bound does not involve the drift; any feasible alpha will do
            a_eff = alpha if reverse else levy.lambda_N * levy.zeta * beta + 1.0
            params = NegativeDriftParams.from_spec(a_eff, beta, levy,
                                                   kappa2=float(cell.get("kappa2", 1.0)))
            if reverse:
                params.resolved_kappa1()
                bound = lambda R: bound_levy_reverse_sup(params, R)
            else:
                bound = lambda R: bound_levy_interval_sup(params, horizon, R)
        R = float(cell["R"]) if "R" in cell else solve_level(bound, float(cell["target"]))
        b_val = bound(R)
    except InfeasibleError as e:
        return {**row, "status": "skipped", "reason": f"infeasible: {e}"}
    except ValueError as e:
        R = float(cell["R"]) if "R" in cell else float("nan")
        b_val = float("nan")
        reason = f"bound undefined: {e}"
    else:
        reason = ""
    row.update(R=R, bound=b_val)
    if not math.isfinite(R):
        return {**row, "status": "skipped", "reason": reason}
    noise_fn = Const(beta)
    if reverse:
        est, ci = estimate_reverse_sup_tail(Const(alpha), noise_fn, levy, horizon, R, n_paths, dt, seed,
                                            n_workers)
    else:
        est, ci = estimate_interval_sup_tail(noise_fn, levy, float(cell.get("t0", 0.0)), horizon, R,
                                             n_paths, dt, seed, n_workers)
    row.update(estimate=est, ci_upper_99=ci)
    if not math.isfinite(b_val):
        return {**row, "status": "skipped", "reason": reason}
    return {**row, "status": "pass" if ci <= b_val else "fail", "reason": ""}


TAIL_HEADER = ["name", "kind", "alpha", "beta", "sigma", "lambda_N", "zeta", "horizon", "R", "bound",
               "estimate", "ci_upper_99", "n_paths", "dt", "seed", "status", "reason"]


def run_tails(cfg, objs, out: Outputs, args) -> int:
    t = cfg["tails"]
    seed = cfg["ensemble"]["master_seed"]
    workers = args.workers if getattr(args, "workers", None) else t["n_workers"]
    rows = [tail_cell(c, t["n_paths"], float(t["dt"]), seed, workers) for c in t["cells"]]
    out.csv("tails.csv", TAIL_HEADER, rows)
    out.counts = {"per_cell": t["n_paths"], "cells": len(rows)}
    return EXIT_ACCEPTANCE if any(r["status"] == "fail" for r in rows) else EXIT_OK


def run_invariant(cfg, objs, out: Outputs, args) -> int:
    spec, solver = objs["model"], objs["solver"]
    inv = cfg["invariant"]
    T, tau = solver.horizon, spec.tau
    windows = inv["windows"] or [[T / 2, 3 * T / 4], [3 * T / 4, T]]
    traj = original_coordinates(run_paths(cfg, objs, 1), spec)[0]
    if traj.exploded:
        out.jsonl("invariant_abort.jsonl", [{"reason": "exploded trajectory", **_explosion_record(0, traj)}])
        out.counts = {"long_run": 1}
        return EXIT_RUNTIME
    (a1, b1), (a2, b2) = sorted(tuple(map(float, w)) for w in windows)
    stride = int(inv["stride"])
    mu = time_average_distribution(traj, a1, b2, stride)
    out.csv("measure.csv", ["atom", "weight"], zip(mu.atoms, mu.weights))
    seg_stride = inv["segment_stride"]
    nu = segment_time_average(traj, tau, max(a1, tau), b2, None if seg_stride is None else int(seg_stride))
    index = []
    for k, (seg, t, w) in enumerate(zip(nu.segments, nu.times, nu.weights)):
        rel = f"segments/segment_{k:05d}.csv"
        with open(out.path(rel), "w", newline="") as fh:
            write_path_csv(seg.samples, fh)
        index.append({"index": k, "time": t, "weight": w, "file": rel})
    out.csv("segments/index.csv", ["index", "time", "weight", "file"], index)
    st = stationarity_check(traj, ((a1, b1), (a2, b2)), stride=stride, n_boot=int(inv["n_boot"]),
                            seed=cfg["ensemble"]["master_seed"])
    f0 = f_at_zero(spec)
    records = [{"record": "histogram", "bins": 50, "range": [float(mu.atoms[0]), float(mu.atoms[-1])]},
               {"record": "stationarity", **st.record()},
               {"record": "branch", "branch": "f(0) > 0" if f0 > 0 else "f(0) = 0", "f0": f0,
                "mass_below_threshold": mu.mass_below(float(inv["extinction_threshold"]))}]
    n_ext = inv["extinction_paths"] if inv["extinction_paths"] is not None else cfg["ensemble"]["n_paths"]
    h_ext = inv["extinction_horizon"] if inv["extinction_horizon"] is not None else min(T, 100 * tau)
    counts = {"long_run": 1, "ensemble": int(n_ext)}
    code = EXIT_OK if st.passed else EXIT_ACCEPTANCE
    if n_ext:
        ens = original_coordinates(run_paths(cfg, objs, int(n_ext), float(h_ext)), spec)
        frac = float(np.mean([tr.exploded for tr in ens]))
        if frac > float(inv["explosion_cap"]):
            records.append({"record": "abort", "exploded_fraction": frac, "cap": inv["explosion_cap"]})
            out.jsonl("invariant.jsonl", records)
            out.counts = counts
            return EXIT_RUNTIME
        records.append({"record": "extinction", "threshold": inv["extinction_threshold"], "t_probe": h_ext,
                        "probability": extinction_probability(ens, float(inv["extinction_threshold"]), h_ext),
                        "exploded_fraction": frac})
        if len(ens) >= MIN_ENSEMBLE:
            t_grid = inv["t_grid"] or list(np.linspace(tau, h_ext, 5))
            deltas = inv["delta_grid"] or [tau / 2, tau / 10, tau / 50]
            prof = boundedness_profile(ens, VALUE, inv["R_grid"], t_grid)
            out.csv("boundedness.csv", ["quantity", "t", "R", "exceedance", "n"], prof.rows())
            tight = tightness_diagnostic(ens, tau, inv["R_grid"], deltas, t_grid, float(inv["eps"]))
            out.csv("tightness_sup.csv", ["quantity", "t", "R", "exceedance", "n"], tight.sup_profile.rows())
            records.append({"record": "tightness", **tight.record()})
    out.jsonl("invariant.jsonl", records)
    out.counts = counts
    return code


BOUNDS_HEADER = ["path", "kind", "R", "status", "checks", "marginal", "violations", "worst_margin", "tol",
                 "alpha", "zeta", "reason"]


def run_bounds_verify(cfg, objs, out: Outputs, args) -> int:
    spec, coupling, levy = objs["model"], objs["coupling"], objs["noise"]
    n = cfg["ensemble"]["n_paths"]
    zeta = abs(float(coupling.c)) * levy.zeta
    t0 = float(cfg["bounds"]["t0"])
    trajs = run_paths(cfg, objs, n) if n else []
    rows = []
    for i, tr in enumerate(trajs):
        if tr.exploded:
            rows.append({"path": i, "kind": "both", "status": "skipped", "reason": "exploded"})
            continue
        v = forcing_path(tr, spec, t0, objs["solver"].explosion_threshold)
        for R in cfg["bounds"]["R"]:
            for kind in ("upper", "lower"):
                base = {"path": i, "kind": kind, "R": float(R), "zeta": zeta}
                try:
                    if kind == "upper":
                        rep = verify_upper_bound(tr.path, v, BoundParams.for_model(spec, float(R), zeta), t0)
                    else:
                        rep = verify_lower_bound(tr.path, v, BoundParams.for_lower_bound(spec, float(R), zeta), t0)
                except (BoundPreconditionError, ModelError, ValueError) as e:
                    rows.append({**base, "status": "skipped", "reason": str(e)})
                    continue
                r = rep.record()
                rows.append({**base, "status": "ok" if rep.ok else "violation", "checks": r["checks"],
                             "marginal": r["marginal"], "violations": r["violations"],
                             "worst_margin": r["worst_margin"], "tol": r["tol"], "alpha": r["alpha"],
                             "reason": ""})
    out.csv("bounds.csv", BOUNDS_HEADER, rows)
    total = {"record": "summary", "paths": n,
             "checks": sum(r.get("checks", 0) for r in rows),
             "marginal": sum(r.get("marginal", 0) for r in rows),
             "violations": sum(r.get("violations", 0) for r in rows),
             "skipped": sum(r["status"] == "skipped" for r in rows)}
    out.jsonl("bounds.jsonl", [total])
    out.counts = {"simulated": n}
    return EXIT_ACCEPTANCE if total["violations"] else EXIT_OK


def run_stability(cfg, objs, out: Outputs, args) -> int:
    spec = objs["model"]
    rec = {"record": "stability", "frame": spec.frame, "sup_f": sup_f(spec), "f0": f_at_zero(spec)}
    try:
        xs = steady_states(spec)
        g, r = spec.gamma.values[0], spec.r.values[0]
        rec["steady_states"] = xs
        rec["residuals"] = [abs(g * x - r * eval_f(spec, x)) for x in xs]
    except ModelError as e:
        rec["steady_states_reason"] = str(e)
    for key, fn in (("zero_stability", zero_stability), ("leading_real_root", leading_real_root)):
        try:
            rec[key] = fn(spec)
        except ModelError as e:
            rec[key + "_reason"] = str(e)
    out.jsonl("stability.jsonl", [rec])
    out.counts = {}
    return EXIT_OK


def run_report(cfg, objs, out: Outputs, args) -> int:
    """Long-format (file, row, column, value) CSV over every table listed in a
    previous run's manifest."""
    src = args.source or cfg["outputs"]["dir"]
    man_path = os.path.join(src, "manifest.json")
    if not os.path.exists(man_path):
        raise ConfigError(f"no manifest.json in {src}")
    with open(man_path) as fh:
        man = json.load(fh)
    rows = []
    for entry in man["files"]:
        rel = entry["file"]
        if not rel.endswith(".csv") or rel.startswith(("segments/", "trajectories/")):
            continue
        with open(os.path.join(src, rel), newline="") as fh:
            for k, rec in enumerate(csv.DictReader(fh)):
                for col, val in rec.items():
                    try:
                        float(val)
                    except (TypeError, ValueError):
                        continue
                    rows.append({"file": rel, "row": k, "column": col, "value": val})
    out.csv("report_long.csv", ["file", "row", "column", "value"], rows)
    out.counts = {}
    return EXIT_OK


COMMANDS = {"simulate": run_simulate, "ensemble": run_ensemble, "tails": run_tails,
            "invariant": run_invariant, "bounds-verify": run_bounds_verify, "stability": run_stability,
            "report": run_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sddekit", description="Simulate and check negative-feedback delay SDEs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="YAML or JSON experiment config")
        s.add_argument("--seed", type=int, help="master seed (overrides ensemble.master_seed)")
        s.add_argument("--n-paths", type=int, dest="n_paths", help="overrides ensemble.n_paths")
        s.add_argument("--out", help="output directory (overrides outputs.dir)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if name == "tails":
            s.add_argument("--workers", type=int, help="process pool size for Monte Carlo chunks")
        if name == "report":
            s.add_argument("--from", dest="source", help="directory of a previous run")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t_start = time.time()
    try:
        cfg = apply_overrides(normalize_config(load_config(args.config)), args)
        objs = validate(cfg, args.command)
    except (ValidationError, yaml.YAMLError, OSError) as e:
        errs = e.errors if isinstance(e, ValidationError) else [str(e)]
        for msg in errs:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Outputs(cfg["outputs"]["dir"])
    out.counts = {}
    try:
        code = COMMANDS[args.command](cfg, objs, out, args)
    except (ConfigError, ModelError, NoiseSpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        code = EXIT_VALIDATION
    except (SolverError, MeasureError, PathError) as e:
        print(f"runtime abort: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    out.manifest(cfg, args.command, code, t_start, out.counts)
    return code


if __name__ == "__main__":
    sys.exit(main())
