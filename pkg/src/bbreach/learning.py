"""Hamiltonian datasets from black-box sampling, and the learned Hamiltonian
and policy regressors trained on them.

Every random quantity of a record (state, gradient direction, control
samples, augmentation noise) is drawn from a counter-based stream keyed by
``(seed, record index)``, so datasets are bit-identical however the work is
chunked or spread over workers.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import BlackBoxSystem, ControlBox, DynamicsError
from .hamiltonian import HamiltonianProvider, HamResult, SampledMaxHamiltonian, counter_uniform, inner
from .nn import ARCHITECTURES, Mlp, TrainConfig, TrainingError, fit
from .statespace import GridSpec, OutOfGridError, interpolate_gradient

MAGIC = b"HJDS"
ZERO_GRAD = 1e-12

# counter streams used by this module (the providers use 1-3)
_STREAM_STATE = 10
_STREAM_GRAD = 11
_STREAM_AUG_STATE = 20
_STREAM_AUG_SNAP = 21
_STREAM_AUG_NOISE = 22

PROVENANCE_BASE = 0
PROVENANCE_AUGMENTED = 1


class DatasetError(ValueError):
    pass


class NonFiniteOutputError(ArithmeticError):
    pass


def _rows(a, n):
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 2 and a.shape[0] == n else a.reshape(n, -1)


@dataclass
class HamDataset:
    """Struct-of-arrays record store.

    ``ham_label`` is <grad_unit, flow(x, ctrl_label)>; ``raw_grad_norm`` is
    the norm of the gradient before normalisation.  ``provenance`` (base or
    augmented) and ``failures`` live in memory only.
    """

    x: np.ndarray
    raw_grad_norm: np.ndarray
    grad_unit: np.ndarray
    ham_label: np.ndarray
    ctrl_label: np.ndarray
    provenance: np.ndarray = None
    failures: int = 0

    def __post_init__(self):
        self.ham_label = np.asarray(self.ham_label, dtype=float).reshape(-1)
        n = len(self.ham_label)
        self.x = _rows(self.x, n)
        self.grad_unit = np.asarray(self.grad_unit, dtype=float).reshape(self.x.shape)
        self.raw_grad_norm = np.asarray(self.raw_grad_norm, dtype=float).reshape(-1)
        self.ctrl_label = _rows(self.ctrl_label, n)
        if self.provenance is None:
            self.provenance = np.full(len(self.ham_label), PROVENANCE_BASE, dtype=np.uint8)
        if not (len(self.raw_grad_norm) == len(self.provenance) == n):
            raise DatasetError("record arrays differ in length")

    def __len__(self):
        return len(self.ham_label)

    @property
    def state_dim(self) -> int:
        return self.x.shape[1]

    @property
    def control_dim(self) -> int:
        return self.ctrl_label.shape[1]

    def inputs(self) -> np.ndarray:
        """Regressor inputs [x, grad_unit]."""
        return np.concatenate([self.x, self.grad_unit], axis=1)

    def subset(self, mask) -> "HamDataset":
        return HamDataset(self.x[mask], self.raw_grad_norm[mask], self.grad_unit[mask],
                          self.ham_label[mask], self.ctrl_label[mask], self.provenance[mask])

    def concat(self, other: "HamDataset") -> "HamDataset":
        if other.state_dim != self.state_dim or other.control_dim != self.control_dim:
            raise DatasetError("datasets have different dimensions")
        return HamDataset(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.raw_grad_norm, other.raw_grad_norm]),
            np.concatenate([self.grad_unit, other.grad_unit]),
            np.concatenate([self.ham_label, other.ham_label]),
            np.concatenate([self.ctrl_label, other.ctrl_label]),
            np.concatenate([self.provenance, other.provenance]),
            self.failures + other.failures,
        )


# ---------------------------------------------------------------------------
# file format


def dataset_to_bytes(ds: HamDataset) -> bytes:
    n, m, count = ds.state_dim, ds.control_dim, len(ds)
    rec = np.concatenate([ds.x, ds.raw_grad_norm[:, None], ds.grad_unit,
                          ds.ham_label[:, None], ds.ctrl_label], axis=1)
    return MAGIC + struct.pack("<IIQ", n, m, count) + rec.astype("<f8").tobytes()


def dataset_from_bytes(data: bytes) -> HamDataset:
    if data[:4] != MAGIC:
        raise DatasetError("not an HJDS dataset")
    if len(data) < 20:
        raise DatasetError("truncated dataset header")
    n, m, count = struct.unpack_from("<IIQ", data, 4)
    width = 2 * n + 2 + m
    body = data[20:]
    if len(body) != 8 * width * count:
        raise DatasetError(f"dataset body holds {len(body)} bytes, header implies {8 * width * count}")
    rec = np.frombuffer(body, dtype="<f8").reshape(count, width).astype(float)
    return HamDataset(rec[:, :n], rec[:, n], rec[:, n + 1:2 * n + 1], rec[:, 2 * n + 1], rec[:, 2 * n + 2:])


def save_dataset(path, ds: HamDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> HamDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# collection


class BoxSampler:
    """Uniform states over an axis-aligned box, keyed by (seed, index)."""

    def __init__(self, lower, upper, stream=_STREAM_STATE):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("sampler box needs lower < upper in every dimension")
        self.stream = stream

    @classmethod
    def of_grid(cls, grid: GridSpec, stream=_STREAM_STATE):
        return cls(grid.lower, grid.box_upper(), stream)

    def __call__(self, seed, index) -> np.ndarray:
        z = counter_uniform(seed, index, len(self.lower), stream=self.stream)
        return self.lower + (self.upper - self.lower) * z


def _unit_gradients(seed, index, n):
    """Uniform draws on the cube [-1, 1]^n, redrawn while the norm is below ZERO_GRAD."""
    g = 2.0 * counter_uniform(seed, index, n, stream=_STREAM_GRAD) - 1.0
    norm = np.sqrt(inner(g, g))
    attempt = 0
    while np.any(norm < ZERO_GRAD):
        attempt += 1
        bad = norm < ZERO_GRAD
        g[bad] = 2.0 * counter_uniform(seed, np.asarray(index)[bad], n,
                                       stream=_STREAM_GRAD + 1000 * attempt) - 1.0
        norm = np.sqrt(inner(g, g))
    return g / norm[:, None], norm


def _label(provider, states, unit, index):
    """Sampled-max labels; rows whose step fails are dropped and counted."""
    try:
        res = provider.evaluate(states, unit, index)
        return res.value, res.control, np.ones(len(index), dtype=bool)
    except DynamicsError:
        pass
    value = np.zeros(len(index))
    control = np.zeros((len(index), provider.sys.control_dim))
    ok = np.ones(len(index), dtype=bool)
    for r in range(len(index)):
        try:
            res = provider.evaluate(states[r:r + 1], unit[r:r + 1], index[r:r + 1])
            value[r], control[r] = res.value[0], res.control[0]
        except DynamicsError:
            ok[r] = False
    return value, control, ok


def _run_chunks(fn, count, chunk, workers):
    bounds = [(lo, min(count, lo + chunk)) for lo in range(0, count, chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
    return [fn(lo, hi) for lo, hi in bounds]


def collect_dataset(sys: BlackBoxSystem, state_sampler, sample_count: int, ctrl_samples_k: int,
                    seed: int = 0, chunk: int = 4096, workers: int = 1, index_offset: int = 0) -> HamDataset:
    """Sampled-max Hamiltonian records at random states and gradient directions.

    For every record: x from ``state_sampler(seed, index)``, a raw gradient
    uniform on [-1, 1]^n (normalised), and the best of ``ctrl_samples_k``
    uniform controls under <grad_unit, flow(x, u)>.  Records whose black-box
    step fails are dropped and reported in ``failures``.
    """
    if ctrl_samples_k < 1:
        raise ValueError("need at least one control sample per record")
    if sample_count < 0:
        raise ValueError("sample count must be non-negative")
    provider = SampledMaxHamiltonian(sys, ctrl_samples_k, seed)
    n = sys.state_dim

    def work(lo, hi):
        idx = np.arange(index_offset + lo, index_offset + hi, dtype=np.int64)
        x = np.asarray(state_sampler(seed, idx), dtype=float)
        unit, norm = _unit_gradients(seed, idx, n)
        value, control, ok = _label(provider, x, unit, idx)
        return x[ok], norm[ok], unit[ok], value[ok], control[ok], int((~ok).sum())

    parts = _run_chunks(work, sample_count, max(1, chunk), workers)
    if not parts:
        return HamDataset(np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0),
                          np.zeros((0, sys.control_dim)))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return HamDataset(*cols, failures=sum(p[5] for p in parts))


def _normal(seed, index, count, stream):
    """Standard normal draws from the counter stream (Box-Muller)."""
    u = counter_uniform(seed, index, 2 * count, stream=stream)
    u1 = 1.0 - u[:, :count]  # (0, 1]
    u2 = u[:, count:]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def augment_dataset(base: HamDataset, series, sys: BlackBoxSystem, count: int, ctrl_samples_k: int,
                    noise_scale: float = 0.1, seed: int = 0, chunk: int = 4096,
                    max_draw_factor: int = 100) -> HamDataset:
    """Append ``count`` records whose gradients follow a solved value series.

    States are uniform over the series' grid and each uses a random snapshot.
    The gradient direction is the interpolated gradient of that snapshot plus
    isotropic noise of size ``noise_scale * |grad|``.  Draws landing on a
    zero gradient are skipped (more are drawn until ``count`` are kept).
    """
    if noise_scale < 0:
        raise ValueError("noise scale must be non-negative")
    grid = series.grid
    n = grid.ndim
    fields = series.fields
    sampler = BoxSampler.of_grid(grid, stream=_STREAM_AUG_STATE)
    provider = SampledMaxHamiltonian(sys, ctrl_samples_k, seed ^ 0x5A5A5A5A)
    kept = []
    have = 0
    skipped = 0
    failures = 0
    next_index = 0
    limit = max_draw_factor * max(count, 1)
    while have < count:
        if next_index >= limit:
            raise DatasetError(f"only {have} of {count} augmentation draws had a nonzero gradient")
        want = min(chunk, count - have)
        idx = np.arange(next_index, next_index + want, dtype=np.int64)
        next_index += want
        x = sampler(seed, idx)
        snap = np.minimum((counter_uniform(seed, idx, 1, stream=_STREAM_AUG_SNAP)[:, 0]
                           * len(fields)).astype(int), len(fields) - 1)
        grads = np.empty((want, n))
        for s in np.unique(snap):
            rows = snap == s
            try:
                grads[rows] = interpolate_gradient(fields[s], x[rows])
            except OutOfGridError as exc:  # pragma: no cover - sampler stays inside the box
                grads[rows] = exc.clamped
        gnorm = np.sqrt(inner(grads, grads))
        if noise_scale > 0:
            grads = grads + noise_scale * gnorm[:, None] * _normal(seed, idx, n, _STREAM_AUG_NOISE)
        norm = np.sqrt(inner(grads, grads))
        good = (gnorm >= ZERO_GRAD) & (norm >= ZERO_GRAD)
        skipped += int((~good).sum())
        if not good.any():
            continue
        x, grads, norm, idx = x[good], grads[good], norm[good], idx[good]
        unit = grads / norm[:, None]
        value, control, ok = _label(provider, x, unit, idx)
        failures += int((~ok).sum())
        take = np.flatnonzero(ok)[:count - have]
        kept.append((x[take], norm[take], unit[take], value[take], control[take]))
        have += len(take)
    cols = [np.concatenate([k[i] for k in kept]) for i in range(5)] if kept else \
        [np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0), np.zeros((0, base.control_dim))]
    extra = HamDataset(*cols, provenance=np.full(len(cols[3]), PROVENANCE_AUGMENTED, dtype=np.uint8),
                       failures=failures)
    extra.skipped = skipped
    return base.concat(extra)


# ---------------------------------------------------------------------------
# learned Hamiltonian and policy


def _hidden(arch):
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
        return ARCHITECTURES[arch]
    return tuple(int(w) for w in arch)


class LearnedHamiltonian(HamiltonianProvider):
    """|p| * H_nu(x, p / |p|); zero when |p| < 1e-12.  No argmax control."""

    has_control = False

    def __init__(self, model: Mlp, state_dim: int, curve=None):
        if model.widths[0] != 2 * state_dim or model.widths[-1] != 1:
            raise ValueError("model shape does not match a Hamiltonian regressor for this state size")
        self.model = model
        self.state_dim = state_dim
        self.curve = curve or []

    def evaluate(self, states, grads, index=None):
        norm = np.sqrt(inner(grads, grads))
        live = norm >= ZERO_GRAD
        value = np.zeros(states.shape[0])
        if live.any():
            unit = grads[live] / norm[live, None]
            h = self.model.predict(np.concatenate([states[live], unit], axis=1))[:, 0]
            if not np.all(np.isfinite(h)):
                raise NonFiniteOutputError("Hamiltonian network produced a non-finite value")
            value[live] = norm[live] * h
        return HamResult(value)

    def unit_predict(self, ds: HamDataset) -> np.ndarray:
        return self.model.predict(ds.inputs())[:, 0]


class PolicyModel:
    """Normalised-control regressor u_psi(x, grad_unit), clamped to the box."""

    def __init__(self, model: Mlp, state_dim: int, box: ControlBox, curve=None):
        if model.widths[0] != 2 * state_dim or model.widths[-1] != box.dim:
            raise ValueError("model shape does not match a policy for this system")
        self.model = model
        self.state_dim = state_dim
        self.box = box
        self.curve = curve or []

    def control(self, states, grads) -> np.ndarray:
        """Controls for a batch; rows with zero gradient get the box centre."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        grads = np.atleast_2d(np.asarray(grads, dtype=float))
        norm = np.sqrt(inner(grads, grads))
        live = norm >= ZERO_GRAD
        out = np.tile(self.box.center, (states.shape[0], 1))
        if live.any():
            unit = grads[live] / norm[live, None]
            z = self.model.predict(np.concatenate([states[live], unit], axis=1))
            if not np.all(np.isfinite(z)):
                raise NonFiniteOutputError("policy network produced a non-finite value")
            out[live] = self.box.denormalize(np.clip(z, -1.0, 1.0))
        return out


def train_ham(ds: HamDataset, config: TrainConfig = None, arch="2x64", log=None) -> LearnedHamiltonian:
    if len(ds) == 0:
        raise TrainingError("empty dataset")
    config = config or TrainConfig()
    res = fit(ds.inputs(), ds.ham_label, _hidden(arch), config, scale_targets=True, log=log)
    return LearnedHamiltonian(res.model, ds.state_dim, res.curve)


def train_policy(ds: HamDataset, box: ControlBox, config: TrainConfig = None, arch="2x64",
                 log=None) -> PolicyModel:
    """Regress box-normalised optimal controls; zero-gradient records are left out."""
    keep = ds.raw_grad_norm >= ZERO_GRAD
    if not keep.any():
        raise TrainingError("no records with a nonzero gradient")
    config = config or TrainConfig()
    sub = ds.subset(keep)
    target = box.normalize(sub.ctrl_label)
    res = fit(sub.inputs(), target, _hidden(arch), config, scale_targets=False, log=log)
    return PolicyModel(res.model, ds.state_dim, box, res.curve)


def heldout_mae(provider: LearnedHamiltonian, ds: HamDataset) -> tuple:
    """(MAE of unit-gradient predictions, label standard deviation)."""
    pred = provider.unit_predict(ds)
    return float(np.mean(np.abs(pred - ds.ham_label))), float(np.std(ds.ham_label))


# ---------------------------------------------------------------------------
# model files


def save_model(path, learned) -> None:
    if isinstance(learned, LearnedHamiltonian):
        meta = {"kind": "ham", "state_dim": learned.state_dim}
    elif isinstance(learned, PolicyModel):
        meta = {"kind": "policy", "state_dim": learned.state_dim,
                "control_box": learned.box.to_dict()}
    else:
        raise TypeError("expected a LearnedHamiltonian or PolicyModel")
    with open(path, "wb") as fh:
        fh.write(learned.model.to_bytes(meta))


def load_model(path):
    with open(path, "rb") as fh:
        model, meta = Mlp.from_bytes(fh.read())
    kind = meta.get("kind")
    if kind == "ham":
        return LearnedHamiltonian(model, meta["state_dim"])
    if kind == "policy":
        box = meta["control_box"]
        return PolicyModel(model, meta["state_dim"], ControlBox.from_bounds(box["low"], box["high"]))
    raise DatasetError(f"unknown model kind {kind!r}")
