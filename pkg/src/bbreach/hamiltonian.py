"""Hamiltonian providers: H(x, p) = max_u <p, f(x, u)> and its maximiser.

All providers evaluate batches: ``states`` (N, n) and ``grads`` (N, n).
``index`` names the rows (grid node or sample number); seeded providers
derive their random draws from ``(seed, index)`` so the result for a row does
not depend on how rows are batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .dynamics import BlackBoxSystem, DynamicsError

# rows per vectorised black-box call; bounds peak memory
_CHUNK_QUERIES = 1 << 18


@dataclass
class HamResult:
    value: np.ndarray
    control: np.ndarray | None = None


def inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise inner product with a fixed left-to-right summation order."""
    acc = a[..., 0] * b[..., 0]
    for i in range(1, a.shape[-1]):
        acc = acc + a[..., i] * b[..., i]
    return acc


# ---------------------------------------------------------------------------
# counter-based random numbers

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, index, count: int, stream: int = 0) -> np.ndarray:
    """Uniform [0, 1) draws, shape (len(index), count), keyed by (seed, stream, index, j).

    SplitMix64 over the key; every row is an independent stream so the draws
    for a row never depend on which other rows share the call.
    """
    index = np.asarray(index, dtype=np.uint64).reshape(-1)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(np.uint64(stream)))
        row = _splitmix64(key ^ _splitmix64(index))
        j = np.arange(count, dtype=np.uint64)
        bits = _splitmix64(row[:, None] ^ (j[None, :] * np.uint64(0xD1B54A32D192ED03)))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# providers


class HamiltonianProvider:
    """Callable ``provider(states, grads, index=None) -> HamResult``."""

    has_control = False

    def evaluate(self, states, grads, index=None) -> HamResult:
        raise NotImplementedError

    def on_nodes(self, states: np.ndarray) -> "HamiltonianProvider":
        """Provider to use when every call passes grid-node rows of ``states``
        with ``index`` naming the node.  The default is the provider itself."""
        return self

    def __call__(self, x, grad, index=None) -> HamResult:
        single = np.ndim(x) == 1
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        gs = np.atleast_2d(np.asarray(grad, dtype=float))
        if index is None:
            index = np.arange(xs.shape[0])
        res = self.evaluate(xs, gs, np.atleast_1d(index))
        if single:
            ctrl = None if res.control is None else res.control[0]
            return HamResult(float(res.value[0]), ctrl)
        return res


class AnalyticHamiltonian(HamiltonianProvider):
    """Closed-form maximum for control-affine built-ins (ground truth).

    With f = drift + B u and a box control set the maximum is
    <p, drift> + sum_i (c_i s_i + w_i |s_i|), s = B^T p, attained at
    u_i = c_i + w_i sign(s_i) (upper bound on ties).
    """

    has_control = True

    def __init__(self, sys: BlackBoxSystem):
        oracle.affine_parts(sys, np.zeros((1, sys.state_dim)))
        self.sys = sys

    def evaluate(self, states, grads, index=None):
        box = self.sys.control_box
        drift, gain = oracle.affine_parts(self.sys, states)
        value = inner(grads, drift)
        s = np.einsum("nk,nkm->nm", grads, gain)
        for i in range(box.dim):
            value = value + box.center[i] * s[:, i] + box.half_width[i] * np.abs(s[:, i])
        control = np.where(s >= 0, box.high, box.low)
        return HamResult(value, control)


class _BlackBoxProvider(HamiltonianProvider):
    has_control = True

    def __init__(self, sys: BlackBoxSystem):
        self.sys = sys

    def _flows(self, states, controls):
        nxt = np.asarray(self.sys.step(states, controls))
        return (nxt - states) / self.sys.step_size


class SampledMaxHamiltonian(_BlackBoxProvider):
    """Running maximum over ``samples`` i.i.d. uniform controls per row."""

    def __init__(self, sys: BlackBoxSystem, samples: int, seed: int = 0):
        super().__init__(sys)
        if samples < 1:
            raise ValueError("need at least one control sample")
        self.samples = int(samples)
        self.seed = int(seed)

    def controls_for(self, index) -> np.ndarray:
        """The control samples a row sees, shape (len(index), samples, n_u)."""
        box = self.sys.control_box
        m = box.dim
        z = counter_uniform(self.seed, index, self.samples * m, stream=1)
        z = z.reshape(len(np.atleast_1d(index)), self.samples, m)
        return box.low + (box.high - box.low) * z

    def evaluate(self, states, grads, index=None):
        n_rows = states.shape[0]
        if index is None:
            index = np.arange(n_rows)
        index = np.asarray(index)
        k = self.samples
        value = np.empty(n_rows)
        control = np.empty((n_rows, self.sys.control_dim))
        rows = max(1, _CHUNK_QUERIES // k)
        for lo in range(0, n_rows, rows):
            hi = min(n_rows, lo + rows)
            b = hi - lo
            ctrl = self.controls_for(index[lo:hi])
            xs = np.repeat(states[lo:hi], k, axis=0)
            flows = self._flows(xs, ctrl.reshape(b * k, -1)).reshape(b, k, -1)
            ham = inner(grads[lo:hi, None, :], flows)
            best = np.argmax(ham, axis=1)
            value[lo:hi] = ham[np.arange(b), best]
            control[lo:hi] = ctrl[np.arange(b), best]
        return HamResult(value, control)


class CornerHamiltonian(_BlackBoxProvider):
    """Maximum over the 2**n_u control-box corners (exact for control-affine f).

    Ties go to the first corner in binary-counting order (dimension 0 least
    significant).  On a general system this never exceeds the true maximum
    beyond the finite-difference bias of the flow estimate.
    """

    def __init__(self, sys: BlackBoxSystem):
        super().__init__(sys)
        self.corners = sys.control_box.corners()

    def evaluate(self, states, grads, index=None):
        n_rows = states.shape[0]
        nc = self.corners.shape[0]
        value = np.empty(n_rows)
        control = np.empty((n_rows, self.corners.shape[1]))
        rows = max(1, _CHUNK_QUERIES // nc)
        for lo in range(0, n_rows, rows):
            hi = min(n_rows, lo + rows)
            ham = np.empty((hi - lo, nc))
            for c in range(nc):
                try:
                    flows = self._flows(states[lo:hi], self.corners[c][None, :])
                except DynamicsError as exc:
                    raise type(exc)(f"corner {self.corners[c].tolist()}: {exc}") from exc
                ham[:, c] = inner(grads[lo:hi], flows)
            best = np.argmax(ham, axis=1)
            value[lo:hi] = ham[np.arange(hi - lo), best]
            control[lo:hi] = self.corners[best]
        return HamResult(value, control)

    def on_nodes(self, states, budget_bytes=600 * 1024 * 1024):
        # the black box is deterministic and time-invariant, so the corner
        # flows at fixed nodes can be queried once for the whole solve
        need = states.shape[0] * states.shape[1] * self.corners.shape[0] * 8
        if need > budget_bytes:
            return self
        return _NodeCorners(self, states)


class _NodeCorners(HamiltonianProvider):
    """Corner maximum over flows precomputed at grid nodes (same bits as the plain provider)."""

    has_control = True

    def __init__(self, base: CornerHamiltonian, states):
        self.corners = base.corners
        n_rows = states.shape[0]
        self.flows = np.empty((self.corners.shape[0], n_rows, states.shape[1]))
        rows = _CHUNK_QUERIES
        for c in range(self.corners.shape[0]):
            for lo in range(0, n_rows, rows):
                hi = min(n_rows, lo + rows)
                try:
                    self.flows[c, lo:hi] = base._flows(states[lo:hi], self.corners[c][None, :])
                except DynamicsError as exc:
                    raise type(exc)(f"corner {self.corners[c].tolist()}: {exc}") from exc

    def evaluate(self, states, grads, index=None):
        if index is None:
            raise ValueError("node-cached corner provider needs node indices")
        index = np.asarray(index)
        ham = np.stack([inner(grads, self.flows[c, index]) for c in range(self.corners.shape[0])], axis=1)
        best = np.argmax(ham, axis=1)
        return HamResult(ham[np.arange(len(index)), best], self.corners[best])


class DecoupledCornerHamiltonian(_BlackBoxProvider):
    """Per-dimension corner choice from n_u + 1 probes around a random nominal.

    Dimension i takes its upper bound when moving u_i from the nominal value
    up to the bound does not decrease <p, flow>.  One extra step at the
    assembled control supplies the returned value, so each row costs exactly
    n_u + 2 queries.
    """

    def __init__(self, sys: BlackBoxSystem, seed: int = 0):
        super().__init__(sys)
        self.seed = int(seed)

    def nominal_for(self, index) -> np.ndarray:
        box = self.sys.control_box
        z = counter_uniform(self.seed, index, box.dim, stream=2)
        return box.low + (box.high - box.low) * z

    def evaluate(self, states, grads, index=None):
        box = self.sys.control_box
        m = box.dim
        n_rows = states.shape[0]
        if index is None:
            index = np.arange(n_rows)
        index = np.asarray(index)
        value = np.empty(n_rows)
        control = np.empty((n_rows, m))
        rows = max(1, _CHUNK_QUERIES // (m + 2))
        dt = self.sys.step_size
        for lo in range(0, n_rows, rows):
            hi = min(n_rows, lo + rows)
            xs, gs = states[lo:hi], grads[lo:hi]
            nom = self.nominal_for(index[lo:hi])
            x_nom = np.asarray(self.sys.step(xs, nom))
            u_star = np.empty_like(nom)
            for i in range(m):
                probe = nom.copy()
                probe[:, i] = box.high[i]
                x_probe = np.asarray(self.sys.step(xs, probe))
                gain = inner(gs, (x_probe - x_nom) / dt)
                u_star[:, i] = np.where(gain >= 0, box.high[i], box.low[i])
            value[lo:hi] = inner(gs, self._flows(xs, u_star))
            control[lo:hi] = u_star
        return HamResult(value, control)


class ZeroHamiltonian(HamiltonianProvider):
    """H = 0: a frozen system."""

    def evaluate(self, states, grads, index=None):
        return HamResult(np.zeros(states.shape[0]))


def flow_bias_constant(sys: BlackBoxSystem, states: np.ndarray, seed: int = 0) -> float:
    """Black-box estimate of the flow-estimate bias constant L_f.

    Uses the second difference of two consecutive steps,
    ||x2 - 2 x1 + x0|| / dt^2 ~ ||d f / dt||, maximised over the given states
    with one random control each.  The flow estimate then deviates from f by
    about L_f * dt / 2 along any unit direction.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    box = sys.control_box
    idx = np.arange(states.shape[0])
    u = box.low + (box.high - box.low) * counter_uniform(seed, idx, box.dim, stream=3)
    x1 = np.asarray(sys.step(states, u))
    x2 = np.asarray(sys.step(x1, u))
    dt = sys.step_size
    acc = np.linalg.norm(x2 - 2.0 * x1 + states, axis=1) / dt ** 2
    return float(acc.max())
