import hashlib
import json
import subprocess
import sys
import textwrap

import pytest

from bbreach import scenario as scn
from bbreach.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_PROTOCOL, main

TINY = {
    "version": 1, "name": "tiny", "seed": 3,
    "system": {"builtin": "dubins", "params": {"step_size": 0.001}},
    "grid": {"lower": [-5.0, -5.0, "-pi"], "upper": [5.0, 5.0, "pi"], "points": [15, 15, 15],
             "periodic": [False, False, True]},
    "horizon": 0.3, "provider": "ham-ca", "truth": "analytic",
    "solver": {"dissipation_budget": 2000, "snapshots": [0.0, 0.15, 0.3]},
    "collect": {"samples": 600, "ctrl_samples": 8, "chunk": 128},
    "train": {"epochs": 2, "batch_size": 64},
    "verify": {"epsilon": 0.05, "calibration_count": 1000, "volume_samples": 4000, "fresh_count": 100},
    "eval": {"count": 20, "trajectories": 2, "filter_threshold": 0.1},
    "render": {"fixed": {"2": 0.0}},
}


def write_scenario(tmp_path, sc, name="sc.json"):
    path = tmp_path / name
    path.write_text(json.dumps(sc))
    return str(path)


def test_presets_validate():
    for name in scn.PRESETS:
        sc = scn.preset(name)
        assert sc["version"] == 1 and sc["name"] == name
    with pytest.raises(scn.ScenarioError):
        scn.preset("nope")


def test_unknown_keys_are_rejected_everywhere():
    for bad in ({"colour": 1}, {"solver": {"cfl": 0.5, "cfll": 0.4}}, {"grid": dict(TINY["grid"], extra=1)},
                {"verify": {"epsilon": 0.0}}, {"version": 2}, {"provider": "magic"}, {"seed": -1},
                {"horizon": -1.0}, {"system": {"builtin": "dubins", "external": {"command": ["x"]}}}):
        sc = json.loads(json.dumps(TINY))
        sc.update(bad)
        with pytest.raises(scn.ScenarioError):
            scn.validate(sc)


def test_defaults_fill_in_and_dump_round_trips():
    sc = scn.validate(json.loads(json.dumps(TINY)))
    assert sc["solver"]["cfl"] == 0.5 and sc["verify"]["beta"] == 1e-10
    assert scn.validate(json.loads(scn.dump_scenario(sc))) == sc


def run_pipeline(tmp_path, scenario, workers):
    out = tmp_path / f"w{workers}"
    out.mkdir()
    common = ["--scenario", scenario, "--workers", str(workers)]
    steps = [
        ["collect", *common, "--out", str(out / "data.hjds")],
        ["train", *common, "--dataset", str(out / "data.hjds"), "--out", str(out / "models")],
        ["solve", *common, "--out", str(out / "solve")],
        ["verify", *common, "--fields", str(out / "solve"), "--out", str(out / "verify.json")],
        ["eval", *common, "--fields", str(out / "solve"), "--out", str(out / "eval")],
        ["render", *common, "--fields", str(out / "solve"), "--out", str(out / "slice")],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv
    return out


def hashes(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    scenario = write_scenario(tmp, TINY)
    return run_pipeline(tmp, scenario, 1), run_pipeline(tmp, scenario, 2)


def test_artifacts_are_identical_across_worker_counts(pipeline_runs):
    a, b = pipeline_runs
    ha, hb = hashes(a), hashes(b)
    assert len(ha) > 15
    assert ha == hb


def test_solve_metrics_report_invariants(pipeline_runs):
    a, _ = pipeline_runs
    m = json.loads((a / "solve" / "metrics.json").read_text())
    assert m["invariants"] == {"terminal_exact": True, "below_target": True, "monotone": True, "nested": True}
    assert m["truth"] == "analytic" and m["mse"] < 1e-6 and m["fp_rate"] == 0.0
    assert [c["time"] for c in m["comparison"]] == [0.0, 0.15, 0.3]
    recs = [json.loads(line) for line in (a / "solve" / "progress.jsonl").read_text().splitlines()]
    assert len(recs) == m["steps"]


def test_verify_and_eval_outputs(pipeline_runs):
    a, _ = pipeline_runs
    v = json.loads((a / "verify.json").read_text())
    assert v["params"]["epsilon"] == 0.05 and v["N"] == 4000
    assert v["validation"]["fresh_count"] == 100
    assert v["seeds"] == {"calibration": 3, "fresh": 4, "volume": 5}
    s = json.loads((a / "eval" / "summary.json").read_text())
    assert s["count"] == 20
    assert (a / "eval" / "trajectory_001.csv").exists()
    assert (a / "slice.svg").read_text().startswith("<svg")
    assert (a / "models" / "ham.model").exists() and (a / "models" / "policy.model").exists()


def test_seed_override_changes_artifacts(tmp_path):
    scenario = write_scenario(tmp_path, TINY)
    main(["collect", "--scenario", scenario, "--out", str(tmp_path / "a.hjds")])
    main(["collect", "--scenario", scenario, "--seed", "4", "--out", str(tmp_path / "b.hjds")])
    assert (tmp_path / "a.hjds").read_bytes() != (tmp_path / "b.hjds").read_bytes()


def test_configuration_errors_exit_2(tmp_path, capsys):
    bad = write_scenario(tmp_path, dict(TINY, colour="red"), "bad.json")
    assert main(["solve", "--scenario", bad, "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err
    good = write_scenario(tmp_path, TINY)
    assert main(["solve", "--scenario", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["solve", "--scenario", good, "--workers", "0"]) == EXIT_CONFIG
    assert main(["verify", "--scenario", good]) == EXIT_CONFIG
    assert main(["verify", "--scenario", good, "--fields", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--scenario", good, "--dataset", str(tmp_path / "none.hjds")]) == EXIT_CONFIG
    nn = write_scenario(tmp_path, dict(TINY, provider="ham-nn", truth=None), "nn.json")
    assert main(["solve", "--scenario", nn, "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert main(["render", "--scenario", good]) == EXIT_CONFIG
    assert main(["serve-dynamics", "--system", "warp-drive"]) == EXIT_CONFIG


def external_scenario(tmp_path, script):
    path = tmp_path / "server.py"
    path.write_text(textwrap.dedent(script))
    sc = json.loads(json.dumps(TINY))
    sc["system"] = {"external": {"command": [sys.executable, str(path)], "control_low": [-1.0],
                                 "control_high": [1.0], "timeout": 5.0}}
    sc["truth"] = None
    return write_scenario(tmp_path, sc, "ext.json")


def test_protocol_errors_exit_4(tmp_path):
    sc = external_scenario(tmp_path, """
        import sys
        print("HELLO 3 1 0.001", flush=True)
        for line in sys.stdin:
            print("NONSENSE", flush=True)
    """)
    assert main(["solve", "--scenario", sc, "--out", str(tmp_path / "s")]) == EXIT_PROTOCOL
    sc = external_scenario(tmp_path, """
        print("GOODBYE", flush=True)
    """)
    assert main(["collect", "--scenario", sc, "--out", str(tmp_path / "d.hjds")]) == EXIT_PROTOCOL


def test_non_finite_state_exits_3(tmp_path):
    sc = external_scenario(tmp_path, """
        import sys
        print("HELLO 3 1 0.001", flush=True)
        for line in sys.stdin:
            print("STATE nan 0.0 0.0", flush=True)
    """)
    assert main(["solve", "--scenario", sc, "--out", str(tmp_path / "s")]) == EXIT_NUMERIC


def test_external_server_matches_builtin(tmp_path):
    sc = json.loads(json.dumps(TINY))
    sc["system"] = {"external": {"command": [sys.executable, "-m", "bbreach", "serve-dynamics", "--system", "dubins"],
                                 "control_low": [-1.0], "control_high": [1.0]}}
    sc["truth"] = None
    sc["collect"]["samples"] = 100
    ext = write_scenario(tmp_path, sc, "ext.json")
    local = write_scenario(tmp_path, dict(TINY, collect=sc["collect"]), "local.json")
    assert main(["collect", "--scenario", ext, "--out", str(tmp_path / "e.hjds")]) == EXIT_OK
    assert main(["collect", "--scenario", local, "--out", str(tmp_path / "l.hjds")]) == EXIT_OK
    assert (tmp_path / "e.hjds").read_bytes() == (tmp_path / "l.hjds").read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bbreach", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("collect", "train", "solve", "verify", "eval", "render", "serve-dynamics"):
        assert cmd in res.stdout
