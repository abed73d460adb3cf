"""Safe controls from a solved value series, black-box rollouts and the
least-restrictive safety filter.

Times here are forward times t in [0, T]; the snapshot used at time t is the
latest one with time <= t, i.e. the one with the longest remaining horizon
(the conservative side).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import BlackBoxSystem
from .hamiltonian import HamiltonianProvider, inner
from .learning import ZERO_GRAD, PolicyModel
from .statespace import TargetFunction, eval_target, gradient, interpolate_many


class ValueLookup:
    """Batched V(x, t) and grad V(x, t) over a value series, with the central
    gradient fields of each snapshot computed once."""

    def __init__(self, series):
        self.series = series
        self.grid = series.grid
        self.times = np.array(series.times)
        self._grads = {}

    def snapshot_index(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return max(k, 0)

    def _grad_fields(self, k):
        if k not in self._grads:
            self._grads[k] = gradient(self.series.fields[k])[0]
        return self._grads[k]

    def lookup(self, x, t, need_grad=True):
        """(values, grads or None, outside) at states ``x`` (N, n) and time ``t``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.snapshot_index(t)
        arrays = [self.series.fields[k].values]
        if need_grad:
            arrays = arrays + list(self._grad_fields(k))
        outs, outside = interpolate_many(self.grid, arrays, x)
        grads = np.stack(outs[1:], axis=1) if need_grad else None
        return outs[0], grads, outside

    def value(self, x, t):
        return self.lookup(x, t, need_grad=False)[0]

    def grad(self, x, t):
        return self.lookup(x, t)[1]


class SafeController:
    """u*(x, t) = argmax_u <grad V(x, t), f(x, u)> from a provider or a policy net.

    Calling it returns ``(controls, zero_grad_flags)``.  Rows whose
    interpolated gradient vanishes get the control-box centre and a flag.
    """

    def __init__(self, lookup: ValueLookup, source, sys: BlackBoxSystem):
        if isinstance(source, HamiltonianProvider) and not source.has_control:
            raise ValueError("provider does not return a maximising control")
        self.lookup = lookup
        self.source = source
        self.box = sys.control_box

    def controls_for(self, x, grads):
        x = np.atleast_2d(x)
        norm = np.sqrt(inner(grads, grads))
        zero = norm < ZERO_GRAD
        u = np.tile(self.box.center, (x.shape[0], 1))
        live = ~zero
        if live.any():
            if isinstance(self.source, PolicyModel):
                u[live] = self.source.control(x[live], grads[live])
            else:
                u[live] = self.source.evaluate(x[live], grads[live], np.flatnonzero(live)).control
        return u, zero

    def __call__(self, x, t):
        _, grads, _ = self.lookup.lookup(x, t)
        return self.controls_for(x, grads)


def safe_control(x, t, lookup: ValueLookup, source, sys: BlackBoxSystem):
    """Single-state convenience wrapper: ``(control, zero_grad_flag)``."""
    u, flag = SafeController(lookup, source, sys)(np.atleast_2d(x), t)
    return u[0], bool(flag[0])


@dataclass
class SafetyFilterConfig:
    threshold: float
    nominal: object

    def __post_init__(self):
        if math.isnan(self.threshold) or self.threshold == math.inf:
            raise ValueError("filter threshold must be finite or -inf")


class SafetyFilter:
    """Nominal control while V(x, t) > threshold, the safe control otherwise.

    Returns ``(controls, active)``; ``active`` marks rows where the safe
    control was applied.
    """

    reports_activation = True

    def __init__(self, safe: SafeController, config: SafetyFilterConfig):
        self.safe = safe
        self.config = config

    def __call__(self, x, t):
        x = np.atleast_2d(x)
        u = np.array(self.config.nominal(x, t), dtype=float).reshape(x.shape[0], -1)
        active = np.zeros(x.shape[0], dtype=bool)
        if self.config.threshold == -math.inf:
            return u, active
        v, grads, _ = self.safe.lookup.lookup(x, t)
        active = v <= self.config.threshold
        if active.any():
            us, _ = self.safe.controls_for(x[active], grads[active])
            u[active] = us
        return u, active


def safety_filter(x, t, safe: SafeController, config: SafetyFilterConfig):
    u, active = SafetyFilter(safe, config)(np.atleast_2d(x), t)
    return u[0], bool(active[0])


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Trajectory:
    times: np.ndarray  # (N+1,)
    states: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N, n_u), control applied over [t_i, t_i+1)
    l_values: np.ndarray  # (N+1,)
    min_l: float
    violated: bool
    truncated: bool = False
    values: np.ndarray | None = None  # V(x_i, t_i) where defined
    filter_active: np.ndarray | None = None  # (N,), only for a safety filter


def _step_counts(sys, horizon, control_period):
    dt = sys.step_size
    n_steps = int(round(horizon / dt))
    if n_steps < 0 or abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not a whole number of {dt} s steps")
    if control_period is None:
        control_period = 10 * dt
    hold = int(round(control_period / dt))
    if hold < 1 or abs(hold * dt - control_period) > 1e-9 * max(1.0, control_period):
        raise ValueError(f"control period {control_period} must be a positive multiple of the step {dt}")
    return n_steps, hold


def _controller_output(controller, x, t):
    out = controller(x, t)
    if isinstance(out, tuple):
        return np.asarray(out[0], dtype=float), np.asarray(out[1], dtype=bool)
    return np.asarray(out, dtype=float), np.zeros(x.shape[0], dtype=bool)


@dataclass
class RolloutBatch:
    min_l: np.ndarray
    violated: np.ndarray
    truncated: np.ndarray
    final: np.ndarray


def rollout_batch(sys: BlackBoxSystem, x0, controller, horizon: float, target: TargetFunction,
                  grid=None, control_period=None, stop_on_violation=True) -> RolloutBatch:
    """Roll many initial states forward under ``controller(x, t)`` with zero-order hold.

    min l is taken over every micro-step.  A trajectory that leaves the grid
    box (non-periodic dims) is truncated there and flagged; its min l covers
    the states reached so far, including the first one outside.
    """
    x = np.array(np.atleast_2d(x0), dtype=float)
    n_steps, hold = _step_counts(sys, horizon, control_period)
    dt = sys.step_size
    min_l = np.asarray(eval_target(target, x), dtype=float).reshape(-1)
    truncated = np.zeros(x.shape[0], dtype=bool)
    if grid is not None:
        truncated |= grid.outside(x)
    live = ~truncated
    if stop_on_violation:
        live &= min_l > 0
    u = np.zeros((x.shape[0], sys.control_dim))
    for i in range(n_steps):
        if not live.any():
            break
        t = i * dt
        rows = np.flatnonzero(live)
        if i % hold == 0:
            u[rows], _ = _controller_output(controller, x[rows], t)
        x[rows] = sys.step(x[rows], u[rows])
        min_l[rows] = np.minimum(min_l[rows], eval_target(target, x[rows]))
        if grid is not None:
            out = grid.outside(x[rows])
            truncated[rows[out]] = True
            live[rows[out]] = False
        if stop_on_violation:
            live &= min_l > 0
    return RolloutBatch(min_l, min_l <= 0, truncated, x)


def rollout(sys: BlackBoxSystem, x0, controller, horizon: float, target: TargetFunction,
            grid=None, control_period=None, lookup: ValueLookup | None = None) -> Trajectory:
    """Full record of one trajectory; see :func:`rollout_batch` for the rules."""
    x = np.asarray(x0, dtype=float).reshape(1, -1)
    n_steps, hold = _step_counts(sys, horizon, control_period)
    dt = sys.step_size
    states = [x[0].copy()]
    controls = []
    active = []
    truncated = bool(grid is not None and grid.outside(x)[0])
    u = None
    flag = False
    for i in range(n_steps):
        if truncated:
            break
        t = i * dt
        if i % hold == 0:
            uu, ff = _controller_output(controller, x, t)
            u, flag = uu.reshape(1, -1), bool(np.atleast_1d(ff)[0])
        x = np.asarray(sys.step(x, u)).reshape(1, -1)
        states.append(x[0].copy())
        controls.append(u[0].copy())
        active.append(flag)
        if grid is not None and grid.outside(x)[0]:
            truncated = True
    states = np.array(states)
    times = np.arange(len(states)) * dt
    filter_active = np.array(active, dtype=bool) if getattr(controller, "reports_activation", False) else None
    l_values = np.asarray(eval_target(target, states), dtype=float).reshape(-1)
    values = None
    if lookup is not None:
        values = np.full(len(states), np.nan)
        for i in range(len(states)):
            v, _, out = lookup.lookup(states[i:i + 1], times[i], need_grad=False)
            if not out[0]:
                values[i] = v[0]
    min_l = float(l_values.min())
    return Trajectory(times, states, np.array(controls).reshape(len(controls), sys.control_dim),
                      l_values, min_l, min_l <= 0, truncated, values, filter_active)


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """Columns t, x0.., u0.., l, V, filter_active.

    The last row has no control.  V is blank where the state left the grid
    and filter_active is blank when the controller was not a safety filter.
    """
    n = traj.states.shape[1]
    m = traj.controls.shape[1] if traj.controls.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)] + ["l", "V", "filter_active"])
        for i in range(len(traj.times)):
            has_u = i < len(traj.controls)
            row = [repr(float(traj.times[i]))] + [repr(float(v)) for v in traj.states[i]]
            row += [repr(float(v)) for v in traj.controls[i]] if has_u else [""] * m
            row.append(repr(float(traj.l_values[i])))
            v = traj.values[i] if traj.values is not None else np.nan
            row.append("" if np.isnan(v) else repr(float(v)))
            fa = traj.filter_active[i] if (traj.filter_active is not None and has_u) else None
            row.append("" if fa is None else str(int(fa)))
            w.writerow(row)


def read_trajectory_csv(path):
    """(header, rows as lists of floats or None) for tests and tooling."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(c) if c != "" else None for c in row] for row in r]
    return header, rows
