"""Scenario files: one JSON document describing a complete pipeline run.

The schema is versioned and strict: unknown keys anywhere are rejected so a
typo never silently falls back to a default.  ``load_scenario`` accepts a
path or ``preset:<name>``.
"""

from __future__ import annotations

import copy
import json
import math
import os

import numpy as np

SCHEMA_VERSION = 1
PROVIDERS = ("analytic", "ham-ca", "ham-ca-decoupled", "ham-nn", "sampled")


class ScenarioError(ValueError):
    pass


# defaults for every section; a scenario may override any subset
DEFAULTS = {
    "version": SCHEMA_VERSION,
    "name": "unnamed",
    "seed": 0,
    "system": {"builtin": None, "params": {}, "external": None},
    "grid": None,
    "target": {"kind": "circle", "dims": [0, 1], "center": [0.0, 0.0], "radius": 2.5},
    "horizon": 1.0,
    "provider": "analytic",
    "truth": None,
    "solver": {
        "cfl": 0.5,
        "integrator": "tvd-rk2",
        "snapshots": None,
        "dissipation": "global",
        "dissipation_budget": 20000,
        "per_node_samples": 16,
    },
    "sampled": {"samples": 64},
    "collect": {"samples": 20000, "ctrl_samples": 64, "chunk": 4096},
    "augment": {"count": 0, "noise_scale": 0.1, "ctrl_samples": None},
    "train": {
        "arch": "2x64",
        "batch_size": 256,
        "learning_rate": 1e-3,
        "epochs": 50,
        "patience": 5,
        "validation_fraction": 0.1,
        "policy": True,
    },
    "verify": {
        "epsilon": 1e-2,
        "beta": 1e-10,
        "calibration_count": 5000,
        "volume_samples": 3000000,
        "fresh_count": 10000,
        "control_period": None,
        "calibration_seed": None,
        "fresh_seed": None,
        "volume_seed": None,
    },
    "eval": {"count": 200, "trajectories": 3, "filter_threshold": None, "control_period": None},
    "render": {"fixed": {}, "time": 0.0, "size": 480},
}

_EXTERNAL_KEYS = {"command", "address", "control_low", "control_high", "timeout"}
_GRID_KEYS = {"lower", "upper", "points", "periodic"}
_TARGET_KEYS = {"kind", "dims", "center", "radius"}


def _merge(base, over, path):
    if not isinstance(over, dict):
        raise ScenarioError(f"{path or 'scenario'} must be an object")
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ScenarioError(f"unknown key {where!r}")
        if isinstance(base[k], dict) and k not in ("params", "fixed"):
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise ScenarioError(f"unknown key(s) {sorted(extra)} in {where}")


def _pos(v, name, integer=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v > 0
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        raise ScenarioError(f"{name} must be a positive {'integer' if integer else 'number'}")


def validate(sc: dict) -> dict:
    """Merge over defaults and check every field; returns the full scenario."""
    if not isinstance(sc, dict):
        raise ScenarioError("scenario must be a JSON object")
    if sc.get("version") != SCHEMA_VERSION:
        raise ScenarioError(f"scenario version must be {SCHEMA_VERSION}, got {sc.get('version')!r}")
    full = _merge(DEFAULTS, sc, "")
    system = full["system"]
    if (system["builtin"] is None) == (system["external"] is None):
        raise ScenarioError("system needs exactly one of 'builtin' or 'external'")
    if system["builtin"] is not None:
        from .dynamics import BUILTIN_SYSTEMS
        if system["builtin"] not in BUILTIN_SYSTEMS:
            raise ScenarioError(f"unknown built-in system {system['builtin']!r}; "
                                f"choose from {sorted(BUILTIN_SYSTEMS)}")
        if not isinstance(system["params"], dict):
            raise ScenarioError("system.params must be an object")
    else:
        ext = system["external"]
        _check_keys(ext, _EXTERNAL_KEYS, "system.external")
        if ("command" in ext) == ("address" in ext):
            raise ScenarioError("system.external needs exactly one of 'command' or 'address'")
        if "control_low" not in ext or "control_high" not in ext:
            raise ScenarioError("system.external needs control_low and control_high")
        if full["provider"] == "analytic" or full["truth"] == "analytic":
            raise ScenarioError("the analytic provider needs a built-in system")
    if full["grid"] is None:
        raise ScenarioError("scenario needs a grid")
    _check_keys(full["grid"], _GRID_KEYS, "grid")
    if set(full["grid"]) != _GRID_KEYS:
        raise ScenarioError(f"grid needs all of {sorted(_GRID_KEYS)}")
    _check_keys(full["target"], _TARGET_KEYS, "target")
    h = full["horizon"]
    if not isinstance(h, (int, float)) or isinstance(h, bool) or not math.isfinite(h) or h < 0:
        raise ScenarioError("horizon must be a non-negative number")
    for key in ("provider", "truth"):
        val = full[key]
        if key == "truth" and val is None:
            continue
        if val not in PROVIDERS:
            raise ScenarioError(f"{key} must be one of {PROVIDERS}, got {val!r}")
    if not isinstance(full["seed"], int) or isinstance(full["seed"], bool) or full["seed"] < 0:
        raise ScenarioError("seed must be a non-negative integer")
    _pos(full["sampled"]["samples"], "sampled.samples", integer=True)
    _pos(full["collect"]["samples"], "collect.samples", integer=True)
    _pos(full["collect"]["ctrl_samples"], "collect.ctrl_samples", integer=True)
    _pos(full["collect"]["chunk"], "collect.chunk", integer=True)
    v = full["verify"]
    if not (0 < v["epsilon"] <= 1) or not (0 < v["beta"] < 1):
        raise ScenarioError("verify.epsilon must lie in (0, 1] and verify.beta in (0, 1)")
    for k in ("calibration_count", "volume_samples", "fresh_count"):
        _pos(v[k], f"verify.{k}", integer=True)
    try:
        build_grid(full)
        build_target(full)
        build_solver_config(full)
        build_train_config(full)
    except ScenarioError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ScenarioError(str(exc)) from exc
    return full


# ---------------------------------------------------------------------------
# builders


def build_grid(sc):
    from .statespace import GridSpec
    g = sc["grid"]
    lower = list(g["lower"])
    upper = [math.pi if u == "pi" else u for u in g["upper"]]
    lower = [-math.pi if v == "-pi" else v for v in lower]
    return GridSpec(tuple(float(v) for v in lower), tuple(float(v) for v in upper),
                    tuple(int(p) for p in g["points"]), tuple(bool(p) for p in g["periodic"]))


def build_target(sc):
    from .statespace import TargetFunction
    t = sc["target"]
    return TargetFunction(t.get("kind", "circle"), dims=tuple(t.get("dims", (0, 1))),
                          center=tuple(t.get("center", (0.0, 0.0))), radius=float(t.get("radius", 1.0)),
                          state_dim=len(sc["grid"]["points"]))


def build_solver_config(sc, workers=1):
    from .solver import SolverConfig
    s = sc["solver"]
    return SolverConfig(horizon=float(sc["horizon"]), cfl=float(s["cfl"]), integrator=s["integrator"],
                        snapshots=s["snapshots"], dissipation=s["dissipation"],
                        dissipation_budget=int(s["dissipation_budget"]), dissipation_seed=int(sc["seed"]),
                        per_node_samples=int(s["per_node_samples"]), workers=int(workers))


def build_train_config(sc, seed=None):
    from .nn import TrainConfig
    t = sc["train"]
    return TrainConfig(batch_size=int(t["batch_size"]), learning_rate=float(t["learning_rate"]),
                       epochs=int(t["epochs"]), patience=int(t["patience"]),
                       validation_fraction=float(t["validation_fraction"]),
                       seed=int(sc["seed"] if seed is None else seed))


def build_system(sc):
    from .dynamics import ControlBox, make_system
    system = sc["system"]
    if system["builtin"] is not None:
        return make_system(system["builtin"], **system["params"])
    from .external import ExternalSystem
    ext = system["external"]
    box = ControlBox.from_bounds(ext["control_low"], ext["control_high"])
    if "command" in ext:
        return ExternalSystem(box, command=ext["command"], timeout=float(ext.get("timeout", 10.0)))
    host, port = str(ext["address"]).rsplit(":", 1)
    return ExternalSystem(box, address=(host, int(port)), timeout=float(ext.get("timeout", 10.0)))


# ---------------------------------------------------------------------------
# presets


_BICYCLE_GRID_BOUNDS = {
    "lower": [-5.0, -5.0, 0.0, "-pi", -0.6],
    "upper": [5.0, 5.0, 2.5, "pi", 0.6],
    "periodic": [False, False, False, True, False],
}

PRESETS = {
    "dubins": {
        "version": 1, "name": "dubins", "seed": 0,
        "system": {"builtin": "dubins", "params": {"step_size": 0.001}},
        "grid": {"lower": [-5.0, -5.0, "-pi"], "upper": [5.0, 5.0, "pi"], "points": [61, 61, 61],
                 "periodic": [False, False, True]},
        "target": {"kind": "circle", "dims": [0, 1], "center": [0.0, 0.0], "radius": 2.5},
        "horizon": 1.0, "provider": "ham-ca", "truth": "analytic",
        "solver": {"snapshots": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]},
        "verify": {"calibration_count": 5000, "volume_samples": 300000, "fresh_count": 10000},
    },
    "dubins-smoke": {
        "version": 1, "name": "dubins-smoke", "seed": 0,
        "system": {"builtin": "dubins", "params": {"step_size": 0.001}},
        "grid": {"lower": [-5.0, -5.0, "-pi"], "upper": [5.0, 5.0, "pi"], "points": [21, 21, 21],
                 "periodic": [False, False, True]},
        "horizon": 0.5, "provider": "ham-ca", "truth": "analytic",
        "collect": {"samples": 2000, "ctrl_samples": 16},
        "train": {"epochs": 5},
        "verify": {"epsilon": 0.05, "calibration_count": 2000, "volume_samples": 20000, "fresh_count": 500},
        "eval": {"count": 50, "trajectories": 1},
        "render": {"fixed": {"2": 0.0}},
    },
    "bicycle": {
        "version": 1, "name": "bicycle", "seed": 0,
        "system": {"builtin": "bicycle", "params": {"step_size": 0.001}},
        "grid": dict(_BICYCLE_GRID_BOUNDS, points=[31, 31, 21, 51, 11]),
        "horizon": 2.0, "provider": "ham-ca", "truth": "analytic",
        "collect": {"samples": 500000, "ctrl_samples": 10000},
        "train": {"arch": "2x64"},
        "render": {"fixed": {"2": 1.0, "3": 0.0, "4": 0.0}},
    },
    "bicycle-smoke": {
        "version": 1, "name": "bicycle-smoke", "seed": 0,
        "system": {"builtin": "bicycle", "params": {"step_size": 0.001}},
        "grid": dict(_BICYCLE_GRID_BOUNDS, points=[15, 15, 11, 25, 7]),
        "horizon": 2.0, "provider": "ham-ca", "truth": "analytic",
        "collect": {"samples": 20000, "ctrl_samples": 256},
        "train": {"arch": "2x64", "epochs": 20},
        "render": {"fixed": {"2": 1.0, "3": 0.0, "4": 0.0}},
    },
    "slipwheel": {
        "version": 1, "name": "slipwheel", "seed": 0,
        "system": {"builtin": "slipwheel", "params": {"step_size": 0.002}},
        # sampling box for data collection; a full 6-D grid solve is out of scope
        "grid": {"lower": [-10.0, -10.0, "-pi", 0.0, -3.0, -1.5], "upper": [10.0, 10.0, "pi", 15.0, 3.0, 1.5],
                 "points": [3, 3, 3, 3, 3, 3], "periodic": [False, False, True, False, False, False]},
        "horizon": 1.5, "provider": "ham-nn",
        "collect": {"samples": 1000000, "ctrl_samples": 10000},
        "train": {"arch": "2x128"},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ScenarioError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return validate(copy.deepcopy(PRESETS[name]))


def load_scenario(ref: str) -> dict:
    if ref.startswith("preset:"):
        return preset(ref[len("preset:"):])
    if not os.path.exists(ref):
        raise ScenarioError(f"scenario file {ref!r} not found")
    try:
        with open(ref) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{ref}: invalid JSON ({exc})") from exc
    return validate(data)


def dump_scenario(sc: dict) -> str:
    return json.dumps(sc, indent=2, sort_keys=True) + "\n"


def snapshot_times(sc) -> list:
    snaps = sc["solver"]["snapshots"]
    if snaps is None:
        return list(np.linspace(0.0, float(sc["horizon"]), 11)) if sc["horizon"] > 0 else [0.0]
    return list(snaps)
