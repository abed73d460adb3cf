"""Small feed-forward regressor with rectifier hidden layers, trained by Adam on MAE."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

ARCHITECTURES = {
    "2x64": (64, 64),
    "2x128": (128, 128),
}


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 50
    patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    loss: str = "mae"

    def __post_init__(self):
        if not (0 < self.validation_fraction <= 0.5):
            raise ValueError("validation fraction must lie in (0, 0.5]")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or not self.learning_rate > 0:
            raise ValueError("batch size, epochs, patience and learning rate must be positive")
        if self.loss != "mae":
            raise ValueError("only the mean-absolute-error loss is supported")


class Mlp:
    """x -> (x - in_mean) / in_scale -> [ReLU(W x + b)]* -> W x + b -> * out_scale + out_mean."""

    def __init__(self, widths, seed=0):
        self.widths = tuple(int(w) for w in widths)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            # He initialisation for rectifier layers
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.in_mean = np.zeros(self.widths[0])
        self.in_scale = np.ones(self.widths[0])
        self.out_mean = np.zeros(self.widths[-1])
        self.out_scale = np.ones(self.widths[-1])

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy_params(self) -> list:
        return [p.copy() for p in self.params]

    def set_params(self, params) -> None:
        for i, p in enumerate(params):
            target = self.weights if i % 2 == 0 else self.biases
            target[i // 2] = np.array(p, dtype=float, copy=True)

    def forward_normalized(self, z, keep=False):
        """Network on already-normalised inputs; returns raw (unscaled) outputs."""
        acts = [z]
        pre = []
        h = z
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < last:
                pre.append(a)
                h = np.maximum(a, 0.0)
                acts.append(h)
            else:
                h = a
        if keep:
            return h, (acts, pre)
        return h

    def backward(self, cache, d_out):
        """Parameter gradients given dLoss/d(raw output)."""
        acts, pre = cache
        grads = [None] * (2 * len(self.weights))
        d = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.weights[i].T) * (pre[i - 1] > 0)
        return grads

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x - self.in_mean) / self.in_scale
        return self.forward_normalized(z) * self.out_scale + self.out_mean

    def loss_and_grads(self, z, y_scaled):
        """MAE on scaled targets and its parameter gradients."""
        out, cache = self.forward_normalized(z, keep=True)
        r = out - y_scaled
        loss = float(np.mean(np.abs(r)))
        d_out = np.sign(r) / r.size
        return loss, self.backward(cache, d_out), cache, r

    # -- serialisation ------------------------------------------------------

    def to_bytes(self, meta=None) -> bytes:
        arrays = {
            "in_mean": self.in_mean, "in_scale": self.in_scale,
            "out_mean": self.out_mean, "out_scale": self.out_scale,
            "widths": np.asarray(self.widths, dtype=np.int64),
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = w
            arrays[f"b{i}"] = b
        arrays["meta"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes):
        with np.load(io.BytesIO(data)) as f:
            widths = tuple(int(v) for v in f["widths"])
            model = cls(widths)
            model.weights = [f[f"W{i}"].copy() for i in range(len(widths) - 1)]
            model.biases = [f[f"b{i}"].copy() for i in range(len(widths) - 1)]
            model.in_mean = f["in_mean"].copy()
            model.in_scale = f["in_scale"].copy()
            model.out_mean = f["out_mean"].copy()
            model.out_scale = f["out_scale"].copy()
            meta = json.loads(f["meta"].tobytes().decode())
        return model, meta


@dataclass
class TrainResult:
    model: Mlp
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("inf")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def canonical_order(inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Permutation that sorts records by content, making training independent
    of the order records arrive in."""
    keys = np.concatenate([inputs, targets.reshape(len(targets), -1)], axis=1)
    return np.lexsort(keys.T[::-1])


def fit(inputs, targets, hidden, config: TrainConfig, scale_targets=True, log=None) -> TrainResult:
    """Mini-batch Adam on mean absolute error; keeps the best-validation parameters.

    ``targets`` may be 1-D (single output) or (N, m).  Inputs are standardised
    per feature; targets too when ``scale_targets``.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise TrainingError("empty training set")
    order = canonical_order(x, y)
    x, y = x[order], y[order]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(x.shape[0])
    n_val = max(1, int(round(config.validation_fraction * x.shape[0])))
    if x.shape[0] - n_val < 1:
        raise TrainingError("not enough records for a training split")
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    model = Mlp((x.shape[1],) + tuple(hidden) + (y.shape[1],), seed=config.seed)
    model.in_mean = x[tr_idx].mean(axis=0)
    scale = x[tr_idx].std(axis=0)
    model.in_scale = np.where(scale > 1e-12, scale, 1.0)
    if scale_targets:
        model.out_mean = y[tr_idx].mean(axis=0)
        s = y[tr_idx].std(axis=0)
        model.out_scale = np.where(s > 1e-12, s, 1.0)
    z = (x - model.in_mean) / model.in_scale
    ys = (y - model.out_mean) / model.out_scale

    def val_mae():
        pred = model.forward_normalized(z[val_idx]) * model.out_scale + model.out_mean
        return float(np.mean(np.abs(pred - y[val_idx])))

    opt = Adam(model.params, lr=config.learning_rate)
    initial = val_mae()
    result = TrainResult(model, best_val_mae=initial)
    best = model.copy_params()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        ep = rng.permutation(tr_idx)
        total = 0.0
        for lo in range(0, ep.size, config.batch_size):
            b = ep[lo:lo + config.batch_size]
            loss, grads, _, _ = model.loss_and_grads(z[b], ys[b])
            opt.step(model.params, grads)
            total += loss * b.size
        vm = val_mae()
        rec = {"epoch": epoch, "train_mae_scaled": total / ep.size, "val_mae": vm}
        result.curve.append(rec)
        if log is not None:
            log(rec)
        if not np.isfinite(vm) or vm > 10.0 * max(initial, 1e-12):
            raise TrainingDivergedError(f"validation MAE {vm:.3g} exceeds 10x the initial {initial:.3g} "
                                        f"at epoch {epoch}")
        if vm < result.best_val_mae:
            result.best_val_mae = vm
            result.best_epoch = epoch
            best = model.copy_params()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_params(best)
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded: int


def _mae_extended(params, z, y):
    """Training MAE and sign patterns evaluated in extended precision."""
    h = z.astype(np.longdouble)
    pattern = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        a = h @ params[2 * i].astype(np.longdouble) + params[2 * i + 1].astype(np.longdouble)
        if i < n_layers - 1:
            pattern.append(a > 0)
            h = np.maximum(a, 0)
        else:
            h = a
    r = h - y.astype(np.longdouble)
    pattern.append(r > 0)
    return np.mean(np.abs(r)), pattern


def grad_check(model: Mlp, probe_count: int = 1000, seed: int = 0, step: float = 1e-6,
               batch: int = 32, abs_floor: float = 1e-8, inputs=None) -> GradCheckReport:
    """Backprop vs central differences on ``probe_count`` random parameters.

    The loss is the training MAE on a random batch.  The difference quotient
    is evaluated in extended precision so its round-off (about 1e-13 here)
    stays far below the gradients being checked; parameters themselves are
    perturbed in float64.  A probe whose +-step perturbation flips any
    rectifier or residual sign sits within ``step`` of a kink where the
    derivative is undefined; such probes are excluded and counted.  Relative
    error is |g_bp - g_fd| / max(|g_bp|, |g_fd|, abs_floor).  ``inputs``
    replaces the random normalised input batch.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(batch, model.widths[0]))
    if inputs is not None:
        z = np.array(inputs, dtype=float).reshape(-1, model.widths[0])
        batch = z.shape[0]
    y = rng.normal(size=(batch, model.widths[-1]))
    _, grads, _, _ = model.loss_and_grads(z, y)
    params = model.params
    _, pattern = _mae_extended(params, z, y)
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    picks = rng.choice(offsets[-1], size=min(probe_count, offsets[-1]), replace=False)
    worst = 0.0
    excluded = 0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[k])
        p = params[k].reshape(-1)
        orig = p[j]
        vals = []
        moved = []
        kinked = False
        for sgn in (1.0, -1.0):
            p[j] = orig + sgn * step
            moved.append(p[j])
            loss, pat2 = _mae_extended(params, z, y)
            kinked |= any(np.any(a != b) for a, b in zip(pattern, pat2))
            vals.append(loss)
        p[j] = orig
        if kinked:
            excluded += 1
            continue
        fd = float((vals[0] - vals[1]) / (np.longdouble(moved[0]) - np.longdouble(moved[1])))
        bp = float(grads[k].reshape(-1)[j])
        rel = abs(bp - fd) / max(abs(bp), abs(fd), abs_floor)
        worst = max(worst, rel)
    return GradCheckReport(worst, len(picks) - excluded, excluded)
