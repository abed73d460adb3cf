"""Probabilistic verification of an approximate safe set.

The safe set is S = {x : V(x, 0) > delta}.  ``calibrate_delta`` picks delta
from rollouts of calibration states: a one-sided binomial test certifies, at
confidence 1 - beta, that the violation rate over S is at most epsilon.
``brt_volume`` measures the unsafe volume {V <= delta} by Monte Carlo, and
``validate`` re-checks the guarantee on fresh rollouts.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binom, binomtest

from .hamiltonian import counter_uniform
from .policy import ValueLookup, rollout_batch

_STREAM_CAL = 30
_STREAM_VOL = 31
_STREAM_FRESH = 32


class VerificationError(RuntimeError):
    pass


class InsufficientCalibrationError(VerificationError):
    def __init__(self, msg, required):
        super().__init__(msg)
        self.required = required


class EmptySafeSetError(VerificationError):
    pass


@dataclass
class VerifyParams:
    epsilon: float = 1e-2
    beta: float = 1e-10
    calibration_count: int = 5000
    seed: int = 0

    def __post_init__(self):
        # epsilon = 1 is accepted as the degenerate "anything goes" setting
        if not (0 < self.epsilon <= 1):
            raise ValueError("epsilon must lie in (0, 1]")
        if not (0 < self.beta < 1):
            raise ValueError("beta must lie in (0, 1)")
        if self.calibration_count < 1000:
            raise ValueError("calibration count must be at least 1000")


def zero_violation_count(epsilon: float, beta: float) -> int:
    """Smallest m with (1 - epsilon)**m <= beta."""
    if epsilon >= 1:
        return 1
    m = math.ceil(math.log(beta) / math.log1p(-epsilon))
    while (1 - epsilon) ** m > beta:  # guard against rounding at the boundary
        m += 1
    while m > 1 and (1 - epsilon) ** (m - 1) <= beta:
        m -= 1
    return m


def certifies(violations: int, population: int, epsilon: float, beta: float) -> bool:
    """True when P(Bin(population, epsilon) <= violations) <= beta."""
    if epsilon >= 1:
        return True
    if population <= 0:
        return False
    return float(binom.cdf(violations, population, epsilon)) <= beta


def delta_from_scores(values: np.ndarray, violated: np.ndarray, epsilon: float, beta: float) -> float:
    """delta from calibration values V(x_i, 0) > 0 and their violation flags.

    Zero violations: delta = 0 when the whole population certifies.
    Otherwise delta is the k-th largest violating value for the smallest k
    whose super-delta population certifies; ties count as not beyond delta.
    """
    values = np.asarray(values, dtype=float)
    violated = np.asarray(violated, dtype=bool)
    if epsilon >= 1:
        return 0.0
    bad = np.sort(values[violated])[::-1]
    if bad.size == 0:
        if certifies(0, values.size, epsilon, beta):
            return 0.0
        need = zero_violation_count(epsilon, beta)
        raise InsufficientCalibrationError(
            f"{values.size} calibration rollouts cannot certify epsilon={epsilon}, beta={beta}; "
            f"at least {need} are needed", need)
    sorted_all = np.sort(values)
    for d in np.unique(bad)[::-1]:
        beyond = int(np.count_nonzero(bad > d))
        population = values.size - int(np.searchsorted(sorted_all, d, side="right"))
        if certifies(beyond, population, epsilon, beta):
            return float(d)
    need = zero_violation_count(epsilon, beta)
    raise InsufficientCalibrationError(
        f"no violating level certifies epsilon={epsilon}, beta={beta} with {values.size} rollouts; "
        f"a super-delta population of at least {need} is needed", need)


def _sample_box(grid, seed, index, stream):
    lo = np.asarray(grid.lower, dtype=float)
    hi = grid.box_upper()
    return lo + (hi - lo) * counter_uniform(seed, index, grid.ndim, stream=stream)


def sample_safe_states(lookup: ValueLookup, level: float, count: int, seed: int, stream: int,
                       batch: int = 65536, max_draws: int = 10 ** 8) -> np.ndarray:
    """The first ``count`` uniform box draws (in draw order) with V(x, 0) > level."""
    grid = lookup.grid
    t0 = lookup.series.times[0]
    keep = []
    have = 0
    start = 0
    while have < count:
        if start >= max_draws:
            raise EmptySafeSetError(f"only {have} of {max_draws} draws had V > {level}")
        idx = np.arange(start, start + batch, dtype=np.int64)
        start += batch
        x = _sample_box(grid, seed, idx, stream)
        v = lookup.value(x, t0)
        x = x[v > level][:count - have]
        keep.append(x)
        have += len(x)
    return np.concatenate(keep)


def _parallel_rollouts(sys, states, controller, horizon, target, grid, control_period, workers, chunk=512):
    bounds = [(lo, min(len(states), lo + chunk)) for lo in range(0, len(states), chunk)]

    def run(b):
        return rollout_batch(sys, states[b[0]:b[1]], controller, horizon, target, grid, control_period)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    if not parts:
        return np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=bool)
    return (np.concatenate([p.min_l for p in parts]), np.concatenate([p.violated for p in parts]),
            np.concatenate([p.truncated for p in parts]))


@dataclass
class Calibration:
    delta: float
    violations: int
    truncated: int
    count: int
    max_violating_value: float | None


def calibrate_delta(lookup: ValueLookup, controller, sys, target, params: VerifyParams, horizon: float,
                    control_period=None, workers: int = 1) -> Calibration:
    """Roll out ``calibration_count`` states with V(x, 0) > 0 and derive delta.

    Trajectories truncated at the grid boundary count as non-violating
    unless they touched the failure set before leaving.
    """
    if params.epsilon >= 1:
        return Calibration(0.0, 0, 0, 0, None)
    x = sample_safe_states(lookup, 0.0, params.calibration_count, params.seed, _STREAM_CAL)
    values = lookup.value(x, lookup.series.times[0])
    _, violated, truncated = _parallel_rollouts(sys, x, controller, horizon, target, lookup.grid,
                                                control_period, workers)
    delta = delta_from_scores(values, violated, params.epsilon, params.beta)
    top = float(values[violated].max()) if violated.any() else None
    return Calibration(delta, int(violated.sum()), int(truncated.sum()), len(x), top)


@dataclass
class VerifiedBRT:
    delta: float
    params: VerifyParams
    volume_mu: float
    sample_count: int
    unsafe_count: int
    delta_negative: bool = False
    calibration: Calibration | None = None
    validation: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "params": asdict(self.params),
            "delta": self.delta,
            "delta_negative": self.delta_negative,
            "volume_mu": self.volume_mu,
            "N": self.sample_count,
            "n_eps": self.unsafe_count,
        }
        if self.calibration is not None:
            d["calibration"] = asdict(self.calibration)
        if self.validation is not None:
            d["validation"] = self.validation
        d.update(self.extra)
        return d


def brt_volume(lookup: ValueLookup, delta: float, sample_count: int, seed: int = 0,
               params: VerifyParams | None = None, batch: int = 1 << 18) -> VerifiedBRT:
    """Monte Carlo volume percentage of {x : V(x, 0) <= delta} over the grid box."""
    if sample_count < 1:
        raise ValueError("need at least one volume sample")
    t0 = lookup.series.times[0]
    unsafe = 0
    for lo in range(0, sample_count, batch):
        idx = np.arange(lo, min(sample_count, lo + batch), dtype=np.int64)
        v = lookup.value(_sample_box(lookup.grid, seed, idx, _STREAM_VOL), t0)
        unsafe += int(np.count_nonzero(v <= delta))
    params = params or VerifyParams()
    return VerifiedBRT(float(delta), params, 100.0 * unsafe / sample_count, sample_count, unsafe,
                       delta_negative=bool(delta < 0))


def validate(verified: VerifiedBRT, lookup: ValueLookup, controller, sys, target, horizon: float,
             fresh_count: int, seed: int, control_period=None, workers: int = 1,
             confidence: float = 0.95) -> dict:
    """Violation rate over fresh states with V(x, 0) > delta; passes iff rate <= epsilon."""
    if fresh_count < 1:
        raise VerificationError("fresh validation needs at least one state")
    if seed == verified.params.seed:
        raise VerificationError("validation seed must differ from the calibration seed")
    x = sample_safe_states(lookup, verified.delta, fresh_count, seed, _STREAM_FRESH)
    _, violated, truncated = _parallel_rollouts(sys, x, controller, horizon, target, lookup.grid,
                                                control_period, workers)
    k = int(violated.sum())
    ci = binomtest(k, fresh_count).proportion_ci(confidence, method="exact")
    rate = k / fresh_count
    report = {
        "fresh_count": fresh_count,
        "violations": k,
        "truncated": int(truncated.sum()),
        "rate": rate,
        "ci_low": float(ci.low),
        "ci_high": float(ci.high),
        "confidence": confidence,
        "seed": seed,
        "passed": bool(rate <= verified.params.epsilon),
    }
    verified.validation = report
    return report


def write_report(path, verified: VerifiedBRT) -> None:
    with open(path, "w") as fh:
        json.dump(verified.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
