import json
import math

import numpy as np
import pytest

from bbreach.dynamics import Dubins3D
from bbreach.hamiltonian import AnalyticHamiltonian
from bbreach.policy import SafeController, ValueLookup
from bbreach.solver import ValueSeries
from bbreach.statespace import GridSpec, TargetFunction, ValueField, target_field
from bbreach.verify import (
    InsufficientCalibrationError,
    VerificationError,
    VerifiedBRT,
    VerifyParams,
    brt_volume,
    calibrate_delta,
    certifies,
    delta_from_scores,
    validate,
    write_report,
    zero_violation_count,
)


def shifted(series, c):
    return ValueSeries(series.horizon, [ValueField(f.grid, f.time, f.values + c) for f in series.fields])


def test_zero_violation_bound():
    # ln(1e-10) / ln(0.99) = 2291.08...
    assert zero_violation_count(1e-2, 1e-10) == 2292
    assert 0.99 ** 2292 <= 1e-10 < 0.99 ** 2291
    assert certifies(0, 2292, 1e-2, 1e-10) and not certifies(0, 2291, 1e-2, 1e-10)
    assert zero_violation_count(0.5, 0.25) == 2
    assert zero_violation_count(1.0, 1e-10) == 1


def test_params_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=1.5), dict(beta=1.0), dict(beta=0.0), dict(calibration_count=999)):
        with pytest.raises(ValueError):
            VerifyParams(**bad)


def test_insufficient_calibration_reports_the_required_count():
    with pytest.raises(InsufficientCalibrationError) as info:
        delta_from_scores(np.linspace(0.1, 1.0, 2000), np.zeros(2000, bool), 1e-2, 1e-10)
    assert info.value.required == 2292
    assert delta_from_scores(np.linspace(0.1, 1.0, 2292), np.zeros(2292, bool), 1e-2, 1e-10) == 0.0


def test_shifted_scores_give_delta_at_the_shift():
    # exact value V plus 0.1: every state with 0 < V_hat <= 0.1 is truly unsafe
    rng = np.random.default_rng(0)
    true_v = rng.uniform(-0.1, 1.0, 20000)
    v_hat = true_v + 0.1
    keep = v_hat > 0
    values, violated = v_hat[keep], true_v[keep] <= 0
    delta = delta_from_scores(values, violated, 1e-2, 1e-10)
    above = np.sort(values[values > delta])
    assert delta <= 0.1 < above[0]
    assert delta == values[violated].max()


def test_violations_beyond_delta_are_tolerated_up_to_epsilon():
    values = np.linspace(0.001, 1.0, 10000)
    violated = np.zeros(10000, bool)
    violated[:100] = True
    # two violations near the top sit in populations far too small to certify
    violated[[9990, 9995]] = True
    delta = delta_from_scores(values, violated, 1e-2, 1e-10)
    assert delta == values[99]
    # with epsilon = 1 nothing needs calibrating
    assert delta_from_scores(values, violated, 1.0, 1e-10) == 0.0


def test_more_data_moves_delta_by_at_most_one_order_statistic():
    # violations are exactly the states below a true level; nested resampling
    rng = np.random.default_rng(3)
    for _ in range(10):
        true_v = rng.uniform(-0.1, 1.0, 40000)
        v_hat = true_v + 0.1
        keep = v_hat > 0
        values, violated = v_hat[keep], true_v[keep] <= 0
        prev = None
        for m in (5000, 10000, 20000, len(values)):
            d = delta_from_scores(values[:m], violated[:m], 1e-2, 1e-10)
            if prev is not None:
                assert d <= prev_next
            vals = np.sort(values[:m])
            prev, prev_next = d, vals[np.searchsorted(vals, d, side="right")]


def plane_lookup(points=201):
    grid = GridSpec((-5.0, -5.0), (5.0, 5.0), (points, points))
    tf = TargetFunction.circle(2.5)
    return ValueLookup(ValueSeries(0.0, [target_field(tf, grid)]))


def test_volume_matches_the_circle_area():
    n = 100_000
    res = brt_volume(plane_lookup(), 0.0, n, seed=0)
    p = math.pi * 2.5 ** 2 / 100.0
    sigma = 100.0 * math.sqrt(p * (1 - p) / n)
    assert abs(res.volume_mu - 100.0 * p) <= 3 * sigma
    assert res.unsafe_count == round(res.volume_mu * n / 100.0)


def test_volume_extremes_monotonicity_and_reproducibility():
    lookup = plane_lookup(41)
    assert brt_volume(lookup, math.inf, 5000).volume_mu == 100.0
    assert brt_volume(lookup, -math.inf, 5000).volume_mu == 0.0
    mus = [brt_volume(lookup, d, 5000, seed=2).volume_mu for d in (-1.0, -0.2, 0.0, 0.3, 1.0, 4.0)]
    assert mus == sorted(mus)
    a = brt_volume(lookup, 0.3, 5000, seed=2)
    assert a.to_dict() == brt_volume(lookup, 0.3, 5000, seed=2).to_dict()
    neg = brt_volume(lookup, -0.2, 100)
    assert neg.delta_negative and not a.delta_negative
    with pytest.raises(ValueError):
        brt_volume(lookup, 0.0, 0)


def test_report_json(tmp_path):
    res = brt_volume(plane_lookup(41), 0.0, 1000)
    path = tmp_path / "v.json"
    write_report(path, res)
    d = json.loads(path.read_text())
    assert d["delta"] == 0.0 and d["N"] == 1000 and d["params"]["beta"] == 1e-10
    assert set(d) >= {"delta", "volume_mu", "N", "n_eps", "params", "delta_negative"}


@pytest.fixture(scope="module")
def dubins_pipeline(request):
    truth = request.getfixturevalue("dubins_61_truth")
    sys = Dubins3D()
    return sys, truth, TargetFunction.circle(2.5)


def test_epsilon_one_certifies_zero_without_rollouts(dubins_pipeline):
    sys, series, tf = dubins_pipeline
    lookup = ValueLookup(series)
    ctl = SafeController(lookup, AnalyticHamiltonian(sys), sys)
    cal = calibrate_delta(lookup, ctl, sys, tf, VerifyParams(epsilon=1.0), 1.0)
    assert cal.delta == 0.0 and cal.count == 0


def test_shifted_value_raises_delta_by_the_shift(dubins_pipeline):
    sys, series, tf = dubins_pipeline
    params = VerifyParams(calibration_count=5000, seed=1)
    base = ValueLookup(series)
    d0 = calibrate_delta(base, SafeController(base, AnalyticHamiltonian(sys), sys), sys, tf, params, 1.0).delta
    bumped = ValueLookup(shifted(series, 0.1))
    # a constant shift leaves the gradient, and so the policy, unchanged
    cal = calibrate_delta(bumped, SafeController(bumped, AnalyticHamiltonian(sys), sys), sys, tf, params, 1.0)
    assert 0.1 <= cal.delta <= d0 + 0.1 + 0.01


class Argmin:
    """Picks the worst control: steers into the failure set."""

    def __init__(self, safe):
        self.safe = safe

    def __call__(self, x, t):
        u, zero = self.safe(x, t)
        return -u, zero


def test_validation_passes_for_the_safe_policy_and_fails_for_argmin(dubins_pipeline):
    sys, series, tf = dubins_pipeline
    lookup = ValueLookup(series)
    safe = SafeController(lookup, AnalyticHamiltonian(sys), sys)
    verified = VerifiedBRT(0.1, VerifyParams(seed=0), 0.0, 0, 0)
    ok = validate(verified, lookup, safe, sys, tf, 1.0, 2000, seed=7)
    assert ok["passed"] and ok["violations"] == 0 and ok["ci_low"] == 0.0
    bad = validate(verified, lookup, Argmin(safe), sys, tf, 1.0, 2000, seed=7)
    assert not bad["passed"] and bad["rate"] > 0.01 and bad["ci_low"] > 0
    assert verified.validation is bad
    with pytest.raises(VerificationError):
        validate(verified, lookup, safe, sys, tf, 1.0, 0, seed=7)
    with pytest.raises(VerificationError):
        validate(verified, lookup, safe, sys, tf, 1.0, 10, seed=0)
