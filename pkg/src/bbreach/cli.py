"""Command-line workflow: collect, train, solve, verify, eval, render, serve-dynamics.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 protocol error.
Artifacts carry no timestamps or host details, so reruns with the same
scenario and seed reproduce them byte for byte at any worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import scenario as scn
from .dynamics import ControlOutOfBoundsError, NonFiniteStateError
from .external import ProtocolError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PROTOCOL = 4


class ConfigError(ValueError):
    pass


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _info(msg):
    print(msg, file=sys.stderr)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# pipeline pieces


def make_provider(sc, system, kind, model_path=None):
    from . import hamiltonian as ham
    if kind == "analytic":
        return ham.AnalyticHamiltonian(system)
    if kind == "ham-ca":
        return ham.CornerHamiltonian(system)
    if kind == "ham-ca-decoupled":
        return ham.DecoupledCornerHamiltonian(system, seed=sc["seed"])
    if kind == "sampled":
        return ham.SampledMaxHamiltonian(system, int(sc["sampled"]["samples"]), seed=sc["seed"])
    if kind == "ham-nn":
        from .learning import LearnedHamiltonian, load_model
        if model_path is None:
            raise ConfigError("the ham-nn provider needs --model pointing at a trained Hamiltonian model")
        model = load_model(model_path)
        if not isinstance(model, LearnedHamiltonian):
            raise ConfigError(f"{model_path} is not a Hamiltonian model")
        return model
    raise ConfigError(f"unknown provider {kind!r}")


def run_solve(sc, system, provider, workers=1, log=None):
    from .solver import estimate_dissipation, solve_hjbvi
    grid = scn.build_grid(sc)
    cfg = scn.build_solver_config(sc, workers)
    cfg.snapshots = tuple(sorted(set(scn.snapshot_times(sc)) | {0.0, float(sc["horizon"])}))
    s = sc["solver"]
    diss = estimate_dissipation(system, grid, int(s["dissipation_budget"]), sc["seed"], mode=s["dissipation"],
                                per_node_samples=int(s["per_node_samples"]))
    return solve_hjbvi(grid, scn.build_target(sc), provider, diss, cfg, log=log)


def save_series(out_dir, series):
    from .statespace import save_field
    _ensure_dir(out_dir)
    files = []
    for i, f in enumerate(series.fields):
        name = f"V_{i:03d}.hjvf"
        save_field(os.path.join(out_dir, name), f)
        files.append(name)
    _write_json(os.path.join(out_dir, "series.json"),
                {"horizon": series.horizon, "times": series.times, "files": files, "steps": series.steps})


def load_series(in_dir):
    from .solver import ValueSeries
    from .statespace import load_field
    path = os.path.join(in_dir, "series.json")
    if not os.path.exists(path):
        raise ConfigError(f"{in_dir} holds no solved value series (series.json missing)")
    with open(path) as fh:
        meta = json.load(fh)
    fields = [load_field(os.path.join(in_dir, f)) for f in meta["files"]]
    return ValueSeries(float(meta["horizon"]), fields, int(meta["steps"]))


def make_controller(sc, system, lookup, policy_path=None):
    """Safe controller for the scenario's provider (policy net for ham-nn)."""
    from .policy import SafeController
    kind = sc["provider"]
    if kind == "ham-nn":
        from .learning import PolicyModel, load_model
        if policy_path is None:
            raise ConfigError("ham-nn scenarios roll out the policy network; pass --policy")
        source = load_model(policy_path)
        if not isinstance(source, PolicyModel):
            raise ConfigError(f"{policy_path} is not a policy model")
    else:
        source = make_provider(sc, system, kind)
    return SafeController(lookup, source, system)


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args, sc):
    from .learning import BoxSampler, collect_dataset, save_dataset
    system = scn.build_system(sc)
    grid = scn.build_grid(sc)
    c = sc["collect"]
    t0 = time.perf_counter()
    ds = collect_dataset(system, BoxSampler.of_grid(grid), int(c["samples"]), int(c["ctrl_samples"]),
                         seed=sc["seed"], chunk=int(c["chunk"]), workers=args.workers)
    elapsed = time.perf_counter() - t0
    out = args.out or "dataset.hjds"
    save_dataset(out, ds)
    rate = len(ds) / elapsed if elapsed > 0 else float("inf")
    _info(f"collected {len(ds)} records ({ds.failures} failed steps) in {elapsed:.1f} s, {rate:.0f} records/s")
    print(json.dumps({"records": len(ds), "failures": ds.failures, "path": out}))
    return EXIT_OK


def cmd_train(args, sc):
    from .learning import load_dataset, save_model, train_ham, train_policy
    if not args.dataset:
        raise ConfigError("train needs --dataset")
    ds = load_dataset(args.dataset)
    if len(ds) == 0:
        raise ConfigError(f"{args.dataset} holds no records")
    system = scn.build_system(sc)
    cfg = scn.build_train_config(sc)
    arch = sc["train"]["arch"]
    out = _ensure_dir(args.out or "models")
    ham = train_ham(ds, cfg, arch)
    save_model(os.path.join(out, "ham.model"), ham)
    _write_curve(os.path.join(out, "ham_curve.csv"), ham.curve)
    summary = {"records": len(ds), "ham_best_val_mae": min(r["val_mae"] for r in ham.curve)}
    if sc["train"]["policy"]:
        pol = train_policy(ds, system.control_box, cfg, arch)
        save_model(os.path.join(out, "policy.model"), pol)
        _write_curve(os.path.join(out, "policy_curve.csv"), pol.curve)
        summary["policy_best_val_mae"] = min(r["val_mae"] for r in pol.curve)
    _write_json(os.path.join(out, "train_summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mae_scaled", "val_mae"])
        for r in curve:
            w.writerow([r["epoch"], repr(r["train_mae_scaled"]), repr(r["val_mae"])])


def cmd_solve(args, sc):
    from .solver import compare_fields, invariant_report, write_progress
    system = scn.build_system(sc)
    out = _ensure_dir(args.out or "solve")
    if args.model and sc["provider"] != "ham-nn":
        raise ConfigError("--model only applies to scenarios with the ham-nn provider")
    provider = make_provider(sc, system, sc["provider"], args.model)
    log = write_progress(os.path.join(out, "progress.jsonl"))
    t0 = time.perf_counter()
    try:
        series = run_solve(sc, system, provider, args.workers, log)
    finally:
        log.close()
    _info(f"solved {sc['provider']} in {time.perf_counter() - t0:.1f} s ({series.steps} steps)")
    save_series(out, series)
    metrics = {"provider": sc["provider"], "steps": series.steps,
               "brt_fraction": float(np.mean(series.initial().values <= 0)),
               "invariants": invariant_report(series, scn.build_target(sc))}
    if sc["truth"] is not None:
        truth = run_solve(sc, system, make_provider(sc, system, sc["truth"], args.model), args.workers)
        save_series(os.path.join(out, "truth"), truth)
        per = []
        for a, b in zip(series.fields, truth.fields):
            m = compare_fields(a, b)
            m["time"] = a.time
            per.append(m)
        metrics["truth"] = sc["truth"]
        metrics["comparison"] = per
        metrics.update({k: per[0][k] for k in ("mse", "fp_rate", "fn_rate")})
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "comparison"}, sort_keys=True))
    return EXIT_OK


def _seeds(sc):
    v = sc["verify"]
    base = sc["seed"]
    cal = base if v["calibration_seed"] is None else v["calibration_seed"]
    fresh = base + 1 if v["fresh_seed"] is None else v["fresh_seed"]
    vol = base + 2 if v["volume_seed"] is None else v["volume_seed"]
    return int(cal), int(fresh), int(vol)


def cmd_verify(args, sc):
    from .policy import ValueLookup
    from .verify import VerifyParams, brt_volume, calibrate_delta, validate, write_report
    if not args.fields:
        raise ConfigError("verify needs --fields (a solve output directory)")
    system = scn.build_system(sc)
    series = load_series(args.fields)
    lookup = ValueLookup(series)
    controller = make_controller(sc, system, lookup, args.policy)
    target = scn.build_target(sc)
    v = sc["verify"]
    cal_seed, fresh_seed, vol_seed = _seeds(sc)
    params = VerifyParams(float(v["epsilon"]), float(v["beta"]), int(v["calibration_count"]), cal_seed)
    horizon = float(series.horizon)
    cal = calibrate_delta(lookup, controller, system, target, params, horizon, v["control_period"], args.workers)
    verified = brt_volume(lookup, cal.delta, int(v["volume_samples"]), vol_seed, params)
    verified.calibration = cal
    report = validate(verified, lookup, controller, system, target, horizon, int(v["fresh_count"]), fresh_seed,
                      v["control_period"], args.workers)
    verified.extra["seeds"] = {"calibration": cal_seed, "fresh": fresh_seed, "volume": vol_seed}
    out = args.out or "verify.json"
    write_report(out, verified)
    if not report["passed"]:
        _info(f"validation FAILED: violation rate {report['rate']:.3g} exceeds epsilon {params.epsilon}")
    print(json.dumps({"delta": verified.delta, "volume_mu": verified.volume_mu,
                      "validation_rate": report["rate"], "passed": report["passed"]}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, sc):
    from .policy import (SafetyFilter, SafetyFilterConfig, ValueLookup, rollout, rollout_batch,
                         write_trajectory_csv)
    from .verify import sample_safe_states
    if not args.fields:
        raise ConfigError("eval needs --fields (a solve output directory)")
    system = scn.build_system(sc)
    series = load_series(args.fields)
    lookup = ValueLookup(series)
    controller = make_controller(sc, system, lookup, args.policy)
    e = sc["eval"]
    if e["filter_threshold"] is not None:
        centre = system.control_box.center

        def nominal(x, t):
            return np.tile(centre, (np.atleast_2d(x).shape[0], 1))

        controller = SafetyFilter(controller, SafetyFilterConfig(float(e["filter_threshold"]), nominal))
    target = scn.build_target(sc)
    horizon = float(series.horizon)
    x0 = sample_safe_states(lookup, 0.0, int(e["count"]), sc["seed"], stream=40)
    batch = rollout_batch(system, x0, controller, horizon, target, lookup.grid, e["control_period"],
                          stop_on_violation=False)
    out = _ensure_dir(args.out or "eval")
    for i in range(min(int(e["trajectories"]), len(x0))):
        traj = rollout(system, x0[i], controller, horizon, target, lookup.grid, e["control_period"], lookup)
        write_trajectory_csv(os.path.join(out, f"trajectory_{i:03d}.csv"), traj)
    summary = {"count": int(len(x0)), "violations": int(batch.violated.sum()),
               "truncated": int(batch.truncated.sum()),
               "violation_rate": float(batch.violated.mean()) if len(x0) else 0.0,
               "min_l": float(batch.min_l.min()) if len(x0) else None}
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _parse_fix(items):
    fixed = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--fix expects DIM=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        fixed[int(k)] = float(v)
    return fixed


def cmd_render(args, sc):
    from .contour import SliceError, render_svg, take_slice, write_slice_csv
    from .statespace import load_field
    if args.field:
        field = load_field(args.field)
    elif args.fields:
        field = load_series(args.fields).at_time(float(sc["render"]["time"]))
    else:
        raise ConfigError("render needs --field or --fields")
    fixed = {int(k): float(v) for k, v in sc["render"]["fixed"].items()}
    fixed.update(_parse_fix(args.fix))
    try:
        sl = take_slice(field, fixed, scn.build_target(sc))
    except SliceError as exc:
        raise ConfigError(str(exc)) from exc
    prefix = args.out or "slice"
    write_slice_csv(prefix + ".csv", sl)
    with open(prefix + ".svg", "w") as fh:
        fh.write(render_svg(sl, int(sc["render"]["size"])))
    print(json.dumps({"csv": prefix + ".csv", "svg": prefix + ".svg"}))
    return EXIT_OK


def cmd_serve(args):
    from .dynamics import make_system
    from .external import EchoSystem, serve_stream, serve_tcp
    kw = {} if args.step_size is None else {"step_size": args.step_size}
    if args.system == "echo":
        system = EchoSystem(**kw)
    else:
        try:
            system = make_system(args.system, **kw)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if args.port is None:
        serve_stream(system, sys.stdin.buffer, sys.stdout.buffer)
    else:
        serve_tcp(system, args.host, args.port,
                  ready=lambda p: _info(f"serving {args.system} on {args.host}:{p}"))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bbreach", description="Black-box Hamilton-Jacobi reachability toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--scenario", required=True, help="scenario JSON file or preset:<name>")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
        sp.add_argument("--out", default=None, help=out_help)

    sp = sub.add_parser("collect", help="sample a Hamiltonian dataset from the black box")
    common(sp, "dataset file to write")
    sp = sub.add_parser("train", help="train Hamiltonian and policy regressors")
    common(sp, "output directory for models and curves")
    sp.add_argument("--dataset", help="HJDS dataset file")
    sp = sub.add_parser("solve", help="solve the HJB-VI on the scenario grid")
    common(sp, "output directory for snapshots and metrics")
    sp.add_argument("--model", help="Hamiltonian model (ham-nn provider)")
    sp = sub.add_parser("verify", help="calibrate delta, measure the BRT volume and validate")
    common(sp, "report JSON path")
    sp.add_argument("--fields", help="solve output directory")
    sp.add_argument("--policy", help="policy model (ham-nn scenarios)")
    sp = sub.add_parser("eval", help="roll out the safe controller from safe states")
    common(sp, "output directory for trajectories")
    sp.add_argument("--fields", help="solve output directory")
    sp.add_argument("--policy", help="policy model (ham-nn scenarios)")
    sp = sub.add_parser("render", help="2-D slice of a value field as CSV and SVG")
    common(sp, "output path prefix")
    sp.add_argument("--field", help="single HJVF file")
    sp.add_argument("--fields", help="solve output directory (uses render.time)")
    sp.add_argument("--fix", action="append", help="pin a dimension, DIM=VALUE (repeatable)")
    sp = sub.add_parser("serve-dynamics", help="serve a built-in system over the text protocol")
    sp.add_argument("--system", required=True, help="built-in system name or 'echo'")
    sp.add_argument("--step-size", type=float, default=None)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=None, help="TCP port; stdin/stdout when omitted")
    return p


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "solve": cmd_solve, "verify": cmd_verify,
            "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    from .learning import DatasetError, NonFiniteOutputError
    from .nn import TrainingDivergedError, TrainingError
    from .solver import SolverConfigError, SolverNumericError
    from .statespace import GridError
    from .verify import VerificationError

    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve-dynamics":
            return cmd_serve(args)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        sc = scn.load_scenario(args.scenario)
        if args.seed is not None:
            sc["seed"] = int(args.seed)
        return COMMANDS[args.command](args, sc)
    except ProtocolError as exc:
        _err(f"protocol: {exc}")
        return EXIT_PROTOCOL
    except (SolverNumericError, NonFiniteOutputError, TrainingDivergedError, NonFiniteStateError,
            FloatingPointError) as exc:
        _err(f"numeric: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, scn.ScenarioError, SolverConfigError, VerificationError, DatasetError, GridError,
            TrainingError, ControlOutOfBoundsError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
