import json

import numpy as np
import pytest

from bbreach.dynamics import BlackBoxSystem, ControlBox, Dubins3D, FrozenSystem
from bbreach.hamiltonian import (
    AnalyticHamiltonian,
    CornerHamiltonian,
    HamiltonianProvider,
    HamResult,
    ZeroHamiltonian,
    inner,
)
from bbreach.solver import (
    DissipationBounds,
    SolverConfig,
    SolverConfigError,
    SolverNumericError,
    compare_fields,
    estimate_dissipation,
    extract_brt,
    invariant_report,
    solve_hjbvi,
    write_progress,
)
from bbreach.statespace import GridSpec, TargetFunction, ValueField, target_field
from conftest import dubins_grid

ALL_HOLD = {"terminal_exact": True, "below_target": True, "monotone": True, "nested": True}


def test_config_validation():
    for bad in (dict(horizon=-1.0), dict(horizon=1.0, cfl=1.5), dict(horizon=1.0, cfl=0.0),
                dict(horizon=1.0, integrator="rk4"), dict(horizon=1.0, snapshots=[0.5, 0.2]),
                dict(horizon=1.0, snapshots=[0.0, 2.0]), dict(horizon=1.0, dissipation="local")):
        with pytest.raises(SolverConfigError):
            SolverConfig(**bad)
    cfg = SolverConfig(1.0, snapshots=[0.5])
    assert cfg.snapshots == (0.0, 0.5, 1.0)


def test_dubins_dissipation_estimate():
    diss = estimate_dissipation(Dubins3D(), dubins_grid(21), 20000, 0)
    assert diss.alpha == pytest.approx([1.2, 1.2, 1.2], abs=2e-3)
    assert np.all(diss.alpha <= 1.2 + 1e-9)


def test_frozen_dissipation_is_zero_and_solve_is_stationary():
    sys = FrozenSystem(2, 1)
    grid = GridSpec((-2.0, -2.0), (2.0, 2.0), (21, 21))
    diss = estimate_dissipation(sys, grid, 1000, 0)
    assert np.all(diss.alpha == 0)
    tf = TargetFunction.circle(1.0)
    series = solve_hjbvi(grid, tf, ZeroHamiltonian(), diss, SolverConfig(1.0, snapshots=[0.0, 0.5, 1.0]))
    l_vals = target_field(tf, grid).values
    for f in series.fields:
        assert f.values.tobytes() == l_vals.tobytes()
    assert series.steps == 2


def test_snapshot_times_are_kept_exactly(dubins_small_solve):
    _, _, series = dubins_small_solve
    assert series.times == list(np.linspace(0.0, 1.0, 11))
    assert series.at_time(0.35).time == pytest.approx(0.3)
    assert series.at_time(1.0).time == 1.0


def test_dubins_invariants(dubins_small_solve, circle):
    _, grid, series = dubins_small_solve
    assert invariant_report(series, circle) == ALL_HOLD
    l_mask = target_field(circle, grid).values <= 0
    for f in series.fields:
        assert np.all(extract_brt(f)[l_mask])
    # dynamics pull states in: the tube is strictly larger than the failure set
    assert extract_brt(series.initial()).sum() > l_mask.sum()


def test_invariant_report_catches_violations(dubins_small_solve, circle):
    _, grid, series = dubins_small_solve
    from bbreach.solver import ValueSeries
    broken = [f for f in series.fields]
    bumped = broken[3].values.copy()
    bumped[0] += 10.0
    broken[3] = ValueField(grid, broken[3].time, bumped)
    report = invariant_report(ValueSeries(series.horizon, broken), circle)
    assert not report["below_target"] and not report["monotone"]


def test_extract_brt_examples(circle):
    grid = dubins_grid(11)
    l_field = target_field(circle, grid)
    assert np.array_equal(extract_brt(l_field), l_field.values <= 0)
    assert not extract_brt(ValueField(grid, 0.0, np.ones(grid.size))).any()


def test_compare_fields_examples(dubins_small_solve):
    _, grid, series = dubins_small_solve
    truth = series.initial()
    assert compare_fields(truth, truth) == {"mse": 0.0, "fp_rate": 0.0, "fn_rate": 0.0}
    shifted = ValueField(grid, truth.time, truth.values + 0.1)
    m = compare_fields(shifted, truth)
    assert m["mse"] == pytest.approx(0.01)
    expect = np.mean((truth.values > -0.1) & (truth.values <= 0))
    assert m["fp_rate"] == pytest.approx(expect) and expect > 0
    assert m["fn_rate"] == 0.0
    with pytest.raises(ValueError):
        compare_fields(truth, series.fields[-1])
    with pytest.raises(ValueError):
        compare_fields(ValueField(dubins_grid(11), 0.0, np.zeros(11 ** 3)), truth)


def test_corner_matches_analytic_on_small_dubins(dubins_small_solve, circle):
    sys, grid, truth = dubins_small_solve
    diss = estimate_dissipation(sys, grid, 20000, 0)
    cfg = SolverConfig(1.0, snapshots=np.linspace(0.0, 1.0, 11))
    corner = solve_hjbvi(grid, circle, CornerHamiltonian(sys), diss, cfg)
    assert invariant_report(corner, circle) == ALL_HOLD
    assert compare_fields(corner.initial(), truth.initial())["mse"] < 1e-6


def test_euler_and_rk2_agree_and_workers_do_not_change_bits(circle):
    sys = Dubins3D()
    grid = dubins_grid(21)
    diss = estimate_dissipation(sys, grid, 5000, 0)
    ham = AnalyticHamiltonian(sys)
    a = solve_hjbvi(grid, circle, ham, diss, SolverConfig(0.5, integrator="euler"))
    b = solve_hjbvi(grid, circle, ham, diss, SolverConfig(0.5, integrator="tvd-rk2"))
    assert compare_fields(a.initial(), b.initial())["mse"] < 1e-3
    c = solve_hjbvi(grid, circle, CornerHamiltonian(sys), diss, SolverConfig(0.5, chunk_size=1000, workers=1))
    d = solve_hjbvi(grid, circle, CornerHamiltonian(sys), diss, SolverConfig(0.5, chunk_size=1000, workers=3))
    assert c.initial().values.tobytes() == d.initial().values.tobytes()


def test_zero_horizon_returns_the_target(circle):
    grid = dubins_grid(11)
    series = solve_hjbvi(grid, circle, AnalyticHamiltonian(Dubins3D()), DissipationBounds([1.2] * 3),
                         SolverConfig(0.0))
    assert len(series.fields) == 1 and series.steps == 0
    assert series.initial().values.tobytes() == target_field(circle, grid).values.tobytes()


def test_progress_log(tmp_path, circle):
    path = tmp_path / "progress.jsonl"
    sink = write_progress(path)
    series = solve_hjbvi(dubins_grid(11), circle, AnalyticHamiltonian(Dubins3D()),
                         DissipationBounds([1.2] * 3), SolverConfig(0.3), log=sink)
    sink.close()
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == series.steps
    assert [r["step"] for r in recs] == list(range(1, series.steps + 1))
    assert recs[-1]["time"] == pytest.approx(0.0, abs=1e-12)
    assert set(recs[0]) == {"step", "time", "min", "max", "dt"}


def test_bad_dissipation_shape_is_rejected(circle):
    with pytest.raises(SolverConfigError):
        solve_hjbvi(dubins_grid(11), circle, ZeroHamiltonian(), DissipationBounds([1.0, 1.0]), SolverConfig(1.0))
    with pytest.raises(SolverConfigError):
        DissipationBounds([1.0, -1.0, 1.0])


def test_non_finite_value_aborts_with_nodes(circle):
    class Exploding(HamiltonianProvider):
        def evaluate(self, states, grads, index=None):
            v = np.zeros(states.shape[0])
            v[5] = np.nan
            return HamResult(v)

    with pytest.raises(SolverNumericError) as info:
        solve_hjbvi(dubins_grid(11), circle, Exploding(), DissipationBounds([1.2] * 3), SolverConfig(0.2))
    assert 5 in info.value.nodes


def test_grid_refinement_reduces_error(circle):
    ham = AnalyticHamiltonian(Dubins3D())
    diss = DissipationBounds([1.2] * 3)

    def solve(n):
        g = GridSpec((-5, -5, -np.pi), (5, 5, np.pi), (n, n, n - 1), (False, False, True))
        return solve_hjbvi(g, circle, ham, diss, SolverConfig(1.0, integrator="tvd-rk2")).initial().values

    ref = solve(81)
    errs = []
    for n in (11, 21, 41):
        k = 80 // (n - 1)
        errs.append(np.mean((solve(n) - ref[::k, ::k, ::k]) ** 2))
    assert errs[0] >= 1.5 * errs[1] and errs[1] >= 1.5 * errs[2]


class Bowed(BlackBoxSystem):
    """x' = -1 + 1.5 (1 - u^2), y' = 0.3 u.

    Only interior controls push back against the leftward drift; every corner
    drifts left at unit speed.
    """

    name = "bowed"
    state_dim = 2

    def __init__(self):
        self.control_box = ControlBox([0.0], [1.0])
        self.step_size = 0.001

    def step(self, x, u):
        single = np.ndim(x) == 1
        xs, us = self._check_inputs(x, u)
        out = xs + self.step_size * np.column_stack([-1.0 + 1.5 * (1.0 - us[:, 0] ** 2), 0.3 * us[:, 0]])
        return out[0] if single else out


class DenseGrid(HamiltonianProvider):
    """Max over a fine control grid (the reference for the non-affine toy)."""

    def __init__(self, sys, count=401):
        self.sys = sys
        self.controls = np.linspace(-1.0, 1.0, count)

    def evaluate(self, states, grads, index=None):
        best = np.full(states.shape[0], -np.inf)
        for u in self.controls:
            f = (self.sys.step(states, [u]) - states) / self.sys.step_size
            best = np.maximum(best, inner(grads, f))
        return HamResult(best)


def test_corner_provider_is_conservative_on_non_affine_system():
    sys = Bowed()
    grid = GridSpec((-3.0, -3.0), (3.0, 3.0), (41, 41))
    tf = TargetFunction.circle(1.0)
    diss = estimate_dissipation(sys, grid, 5000, 0)
    cfg = SolverConfig(1.0)
    truth = solve_hjbvi(grid, tf, DenseGrid(sys), diss, cfg).initial()
    corner = solve_hjbvi(grid, tf, CornerHamiltonian(sys), diss, cfg).initial()
    h = grid.spacing.max()
    assert np.all(corner.values <= truth.values + h)
    # and the gap is real, not just noise
    assert np.mean(truth.values - corner.values) > 0.05
    assert compare_fields(corner, truth)["fp_rate"] == 0.0


def test_node_cached_corners_match_per_step_queries(monkeypatch, circle):
    from bbreach import solver
    from bbreach.dynamics import CountingSystem
    sys = CountingSystem(Dubins3D())
    grid = dubins_grid(15)
    diss = DissipationBounds([1.2] * 3)
    cfg = SolverConfig(0.4, integrator="tvd-rk2")
    a = solve_hjbvi(grid, circle, CornerHamiltonian(sys), diss, cfg)
    # corner flows at the nodes are queried once for the whole solve
    assert sys.queries == 2 * grid.size
    monkeypatch.setattr(solver, "_STATE_CACHE_BYTES", 0)
    sys.queries = 0
    b = solve_hjbvi(grid, circle, CornerHamiltonian(sys), diss, cfg)
    # without the cache: every node, both corners, two stages per step
    assert sys.queries == 2 * grid.size * 2 * b.steps
    assert [f.values.tobytes() for f in a.fields] == [f.values.tobytes() for f in b.fields]
