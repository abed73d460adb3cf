"""Grid solve of the avoid HJB variational inequality with Lax-Friedrichs dissipation.

Time runs backwards from the terminal condition V(x, T) = l(x).  Writing
W(x, s) = V(x, T - s) for the time-to-go s, dynamic programming over a short
interval gives

    W(x, s + ds) = min(l(x), max_u W(x + f(x, u) ds, s))
                 = min(l(x), W(x, s) + ds * H(x, grad W)),

so the explicit update adds ``dt * H`` and then takes the minimum with l: the
value grows where the system can move away from the failure set, and never
above l.  The numerical Hamiltonian is

    H_LF = H(x, (p- + p+) / 2) + sum_i alpha_i (p+_i - p-_i) / 2

with alpha_i bounding |f_i|.  The dissipation enters with a plus sign because
the update moves along +H: in this direction (p+ - p-) / 2 ~ (h / 2) W_xx is a
diffusion term, and with the opposite sign the scheme is unconditionally
unstable.  After every stage the update is also clamped to
the value at the start of the step; the exact solution is non-increasing in
the time-to-go, and the clamp keeps the discrete solution so.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import BlackBoxSystem, DynamicsError, flow_estimate
from .hamiltonian import HamiltonianProvider, counter_uniform
from .statespace import GridSpec, TargetFunction, ValueField, target_field, upwind_pair

INFLATION = 1.2
_STATE_CACHE_BYTES = 600 * 1024 * 1024


class SolverError(RuntimeError):
    pass


class SolverConfigError(SolverError, ValueError):
    pass


class SolverNumericError(SolverError):
    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


@dataclass
class SolverConfig:
    horizon: float
    cfl: float = 0.5
    integrator: str = "euler"
    snapshots: tuple | None = None
    dissipation: str = "global"
    dissipation_budget: int = 20000
    dissipation_seed: int = 0
    per_node_samples: int = 16
    chunk_size: int = 1 << 17
    workers: int = 1

    def __post_init__(self):
        if not (self.horizon >= 0 and math.isfinite(self.horizon)):
            raise SolverConfigError("horizon must be finite and non-negative")
        if not (0 < self.cfl <= 1):
            raise SolverConfigError(f"CFL number {self.cfl} outside (0, 1]")
        if self.integrator not in ("euler", "tvd-rk2"):
            raise SolverConfigError(f"unknown integrator {self.integrator!r}")
        if self.dissipation not in ("global", "per-node"):
            raise SolverConfigError(f"unknown dissipation mode {self.dissipation!r}")
        snaps = (0.0, self.horizon) if self.snapshots is None else tuple(float(s) for s in self.snapshots)
        if any(b < a for a, b in zip(snaps, snaps[1:])):
            raise SolverConfigError("snapshot times must be sorted")
        if snaps and (snaps[0] < 0 or snaps[-1] > self.horizon):
            raise SolverConfigError("snapshot times must lie in [0, horizon]")
        snaps = tuple(sorted(set(snaps) | {0.0, float(self.horizon)}))
        self.snapshots = snaps


@dataclass
class DissipationBounds:
    """alpha_i >= max |f_i|; shape (n,) for global mode or (N, n) per node."""

    alpha: np.ndarray
    samples_used: int = 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha < 0):
            raise SolverConfigError("dissipation coefficients must be finite and non-negative")

    @property
    def global_alpha(self) -> np.ndarray:
        return self.alpha if self.alpha.ndim == 1 else self.alpha.max(axis=0)


@dataclass
class ValueSeries:
    """Snapshots V(., t) of one solve, sorted by time t (t = horizon is the target)."""

    horizon: float
    fields: list = field(default_factory=list)
    steps: int = 0

    @property
    def grid(self) -> GridSpec:
        return self.fields[0].grid

    @property
    def times(self) -> list:
        return [f.time for f in self.fields]

    def at_time(self, t: float) -> ValueField:
        """Snapshot with the latest time <= t, i.e. the one whose remaining
        horizon is at least T - t (the conservative side)."""
        best = self.fields[0]
        for f in self.fields:
            if f.time <= t + 1e-12:
                best = f
        return best

    def initial(self) -> ValueField:
        return self.fields[0]


def _states_of(grid, lo, hi, cache):
    if cache is not None:
        return cache[lo:hi]
    return grid.states(np.arange(lo, hi))


def estimate_dissipation(sys: BlackBoxSystem, grid: GridSpec, budget: int = 20000, seed: int = 0,
                         mode: str = "global", per_node_samples: int = 16) -> DissipationBounds:
    """Sampled bound on |f_i| inflated by 1.2.

    Global mode draws ``budget`` (state, control) pairs over the grid box.
    Per-node mode takes the maximum over the control-box corners and
    ``per_node_samples`` random controls at every node.
    """
    if budget < 1:
        raise SolverConfigError("dissipation budget must be at least 1")
    if mode == "per-node":
        box = sys.control_box
        alpha = np.zeros((grid.size, grid.ndim))
        controls = list(box.corners())
        for lo in range(0, grid.size, 1 << 16):
            hi = min(grid.size, lo + (1 << 16))
            xs = grid.states(np.arange(lo, hi))
            z = counter_uniform(seed, np.arange(lo, hi), per_node_samples * box.dim, stream=5)
            z = z.reshape(hi - lo, per_node_samples, box.dim)
            for c in controls:
                alpha[lo:hi] = np.maximum(alpha[lo:hi], np.abs(flow_estimate(sys, xs, c[None, :])))
            for j in range(per_node_samples):
                u = box.low + (box.high - box.low) * z[:, j]
                alpha[lo:hi] = np.maximum(alpha[lo:hi], np.abs(flow_estimate(sys, xs, u)))
        return DissipationBounds(INFLATION * alpha, grid.size)

    rng = np.random.default_rng(seed)
    xs = grid.sample_uniform(rng, budget)
    us = sys.control_box.sample(rng, budget)
    try:
        flows = flow_estimate(sys, xs, us)
        ok = np.ones(budget, dtype=bool)
    except DynamicsError:
        flows = np.zeros((budget, grid.ndim))
        ok = np.zeros(budget, dtype=bool)
        for i in range(budget):
            try:
                flows[i] = flow_estimate(sys, xs[i], us[i])
                ok[i] = True
            except DynamicsError:
                pass
    used = int(ok.sum())
    if used < 0.5 * budget:
        raise SolverNumericError(f"only {used} of {budget} dissipation samples succeeded")
    alpha = INFLATION * np.abs(flows[ok]).max(axis=0)
    return DissipationBounds(alpha, used)


def _time_step(grid: GridSpec, diss: DissipationBounds, cfl: float) -> float:
    total = float(diss.global_alpha.sum())
    if total == 0.0:
        return math.inf
    return cfl * float(grid.spacing.min()) / total


def _numerical_hamiltonian(values, grid, provider, diss, cfg, state_cache, pool):
    n = grid.ndim
    size = grid.size
    grads = np.empty((size, n))
    damping = np.zeros(size)
    alpha = diss.alpha
    for i in range(n):
        pm, pp = upwind_pair(values, grid, i)
        pm = pm.reshape(-1)
        pp = pp.reshape(-1)
        grads[:, i] = 0.5 * (pm + pp)
        a_i = alpha[i] if alpha.ndim == 1 else alpha[:, i]
        damping += a_i * (pp - pm) * 0.5
        del pm, pp
    ham = np.empty(size)
    bounds = [(lo, min(size, lo + cfg.chunk_size)) for lo in range(0, size, cfg.chunk_size)]

    def run(b):
        lo, hi = b
        res = provider.evaluate(_states_of(grid, lo, hi, state_cache), grads[lo:hi], np.arange(lo, hi))
        ham[lo:hi] = res.value

    if pool is None:
        for b in bounds:
            run(b)
    else:
        list(pool.map(run, bounds))
    return (ham + damping).reshape(grid.shape)


def solve_hjbvi(grid: GridSpec, target: TargetFunction, provider: HamiltonianProvider,
                diss: DissipationBounds, config: SolverConfig,
                log: Callable[[dict], None] | None = None) -> ValueSeries:
    """March the avoid HJB-VI from t = T down to t = 0.

    Returns a :class:`ValueSeries` holding a snapshot for each configured time.
    ``log`` receives one progress record per time step.
    """
    if diss.alpha.shape[-1] != grid.ndim:
        raise SolverConfigError("dissipation bounds do not match the grid dimension")
    if diss.alpha.ndim == 2 and diss.alpha.shape[0] != grid.size:
        raise SolverConfigError("per-node dissipation does not match the grid size")
    T = float(config.horizon)
    l_field = target_field(target, grid, time=T)
    l_vals = np.array(l_field.values)
    W = l_vals.copy()
    dt_max = _time_step(grid, diss, config.cfl)

    cache = None
    if grid.size * grid.ndim * 8 <= _STATE_CACHE_BYTES:
        cache = grid.states()
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    if cache is not None:
        provider = provider.on_nodes(cache)

    # snapshot times as time-to-go, ascending
    # (time-to-go, requested time) pairs; snapshots keep the requested time exactly
    pending = sorted({(T - t, t) for t in config.snapshots}, key=lambda p: (p[0], -p[1]))
    fields = {}
    s = 0.0
    step = 0
    while pending and pending[0][0] <= 0.0:
        fields[pending[0][1]] = ValueField(grid, pending[0][1], l_vals)
        pending = pending[1:]
    try:
        while pending:
            goal = pending[0][0]
            dt = min(dt_max, goal - s)
            land = dt >= goal - s
            W0 = W
            if config.integrator == "euler":
                W = W0 + dt * _numerical_hamiltonian(W0, grid, provider, diss, config, cache, pool)
                W = np.minimum(np.minimum(W, W0), l_vals)
            else:
                W1 = W0 + dt * _numerical_hamiltonian(W0, grid, provider, diss, config, cache, pool)
                W1 = np.minimum(np.minimum(W1, W0), l_vals)
                W2 = W1 + dt * _numerical_hamiltonian(W1, grid, provider, diss, config, cache, pool)
                W2 = np.minimum(np.minimum(W2, W0), l_vals)
                W = np.minimum(0.5 * (W0 + W2), W0)
            bad = ~np.isfinite(W)
            if bad.any():
                nodes = np.flatnonzero(bad)[:10]
                raise SolverNumericError(
                    f"non-finite value at {int(bad.sum())} nodes, first {nodes.tolist()} "
                    f"(states {grid.states(nodes).tolist()})", nodes)
            s = goal if land else s + dt
            step += 1
            if log is not None:
                log({"step": step, "time": T - s, "min": float(W.min()), "max": float(W.max()), "dt": dt})
            if land:
                while pending and pending[0][0] <= s:
                    fields[pending[0][1]] = ValueField(grid, pending[0][1], W)
                    pending = pending[1:]
    finally:
        if pool is not None:
            pool.shutdown()
    ordered = [fields[t] for t in sorted(fields)]
    return ValueSeries(T, ordered, step)


def extract_brt(field: ValueField) -> np.ndarray:
    """Unsafe-node mask: V <= 0 (zero counts as unsafe)."""
    return field.values <= 0.0


def invariant_report(series: ValueSeries, target: TargetFunction) -> dict:
    """Check a finished solve: exact terminal value, V <= l, monotonicity in
    the horizon and nested unsafe sets.  Each entry is True when it holds."""
    l_vals = target_field(target, series.grid).values
    fields = series.fields
    terminal = fields[-1]
    report = {
        "terminal_exact": bool(abs(terminal.time - series.horizon) < 1e-12
                               and terminal.values.tobytes() == l_vals.tobytes()),
        "below_target": all(bool(np.all(f.values <= l_vals)) for f in fields),
        "monotone": True,
        "nested": True,
    }
    # fields are sorted by forward time, so earlier fields have longer horizons
    for early, late in zip(fields, fields[1:]):
        if np.any(early.values > late.values):
            report["monotone"] = False
        if np.any(extract_brt(late) & ~extract_brt(early)):
            report["nested"] = False
    return report


def compare_fields(candidate: ValueField, truth: ValueField) -> dict:
    """Node-wise MSE plus false-positive / false-negative rates.

    A false positive is a node the candidate calls safe (V > 0) while the
    truth calls it unsafe (V <= 0).
    """
    if candidate.grid != truth.grid:
        raise ValueError("fields live on different grids")
    if abs(candidate.time - truth.time) > 1e-9:
        raise ValueError(f"fields at different times ({candidate.time} vs {truth.time})")
    c, t = candidate.values, truth.values
    diff = c - t
    return {
        "mse": float(np.mean(diff * diff)),
        "fp_rate": float(np.mean((c > 0) & (t <= 0))),
        "fn_rate": float(np.mean((c <= 0) & (t > 0))),
    }


def write_progress(path):
    """JSON-lines progress sink for :func:`solve_hjbvi`."""
    fh = open(path, "w")

    def sink(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    sink.close = fh.close
    return sink
