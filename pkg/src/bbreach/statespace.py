"""Rectilinear grids, scalar fields on them, and target (failure-set) functions.

Storage is row-major with dimension 0 slowest, so ``values.ravel()`` is the
portable on-disk order.  Periodic dimensions hold ``points`` nodes spread over
``[lower, upper)``; the node at ``upper`` is the wrap of the node at ``lower``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"HJVF"
FIELD_VERSION = 1

# relative distance to a node below which a query snaps onto it
_NODE_SNAP = 1e-9


class GridError(ValueError):
    pass


class OutOfGridError(GridError):
    """A query fell outside a non-periodic dimension.

    ``clamped`` holds the values obtained by clamping the queries back into
    the box and ``outside`` flags which queries were affected.
    """

    def __init__(self, message, clamped=None, outside=None):
        super().__init__(message)
        self.clamped = clamped
        self.outside = outside


@dataclass(frozen=True)
class GridSpec:
    lower: tuple
    upper: tuple
    points: tuple
    periodic: tuple = None

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        points = tuple(int(v) for v in self.points)
        periodic = self.periodic
        if periodic is None:
            periodic = (False,) * len(points)
        periodic = tuple(bool(v) for v in periodic)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "periodic", periodic)
        n = len(points)
        if not (len(lower) == len(upper) == len(periodic) == n) or n == 0:
            raise GridError("lower, upper, points and periodic must have one entry per dimension")
        for i in range(n):
            if points[i] < 3:
                raise GridError(f"dimension {i}: need at least 3 points, got {points[i]}")
            if not (np.isfinite(lower[i]) and np.isfinite(upper[i]) and lower[i] < upper[i]):
                raise GridError(f"dimension {i}: require finite lower < upper")

    @property
    def ndim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points, dtype=np.int64))

    @property
    def spacing(self) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        pts = np.asarray(self.points, dtype=float)
        div = np.where(self.periodic, pts, pts - 1)
        return (hi - lo) / div

    @property
    def period(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    def axis(self, dim: int) -> np.ndarray:
        h = self.spacing[dim]
        return self.lower[dim] + h * np.arange(self.points[dim])

    def axes(self) -> list:
        return [self.axis(i) for i in range(self.ndim)]

    def states(self, flat_index=None) -> np.ndarray:
        """Node coordinates, shape (N, n); all nodes when ``flat_index`` is None."""
        if flat_index is None:
            flat_index = np.arange(self.size)
        idx = np.unravel_index(np.asarray(flat_index), self.shape)
        h = self.spacing
        out = np.empty((np.size(flat_index), self.ndim))
        for i in range(self.ndim):
            out[:, i] = self.lower[i] + h[i] * idx[i]
        return out

    def box_upper(self) -> np.ndarray:
        """Upper corner of the sampling box (periodic dims cover a full period)."""
        return np.asarray(self.upper, dtype=float)

    def sample_uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lo = np.asarray(self.lower)
        return lo + (self.box_upper() - lo) * rng.random((count, self.ndim))

    def wrap(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for i in range(self.ndim):
            if self.periodic[i]:
                p = self.upper[i] - self.lower[i]
                x[..., i] = self.lower[i] + np.mod(x[..., i] - self.lower[i], p)
        return x

    def outside(self, x: np.ndarray) -> np.ndarray:
        """Boolean mask of queries outside a non-periodic dimension."""
        x = np.atleast_2d(x)
        mask = np.zeros(x.shape[0], dtype=bool)
        for i in range(self.ndim):
            if not self.periodic[i]:
                mask |= (x[:, i] < self.lower[i]) | (x[:, i] > self.upper[i])
        return mask

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points": list(self.points),
            "periodic": list(self.periodic),
        }


@dataclass(frozen=True, eq=False)
class ValueField:
    """V(x, t) sampled on a grid.  ``values`` is read-only, shaped like the grid."""

    grid: GridSpec
    time: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.size != self.grid.size:
            raise GridError(f"field has {v.size} values, grid has {self.grid.size} nodes")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise GridError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", float(self.time))


# ---------------------------------------------------------------------------
# target functions


@dataclass(frozen=True)
class TargetFunction:
    """Signed target l(x); the failure set is {l <= 0}.

    kinds: ``circle`` (planar distance over ``dims`` minus ``radius``),
    ``sphere`` (same over any number of dims) and ``custom`` (a stored field
    interpolated multilinearly).
    """

    kind: str
    dims: tuple = (0, 1)
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    custom_field: ValueField | None = None
    state_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.kind in ("circle", "sphere"):
            if self.kind == "circle" and len(self.dims) != 2:
                raise ValueError("circle target takes exactly two dims")
            if len(self.center) != len(self.dims):
                raise ValueError("center must match dims")
            if not self.radius > 0:
                raise ValueError("radius must be positive")
        elif self.kind == "custom":
            if self.custom_field is None:
                raise ValueError("custom target needs a field")
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def circle(cls, radius, center=(0.0, 0.0), dims=(0, 1), state_dim=None):
        return cls("circle", dims=dims, center=center, radius=radius, state_dim=state_dim)

    def __call__(self, x) -> np.ndarray:
        return eval_target(self, x)

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ValueError("custom targets are not serialisable as parameters")
        return {"kind": self.kind, "dims": list(self.dims), "center": list(self.center),
                "radius": self.radius}


def eval_target(tf: TargetFunction, x):
    """l(x) for one state (returns float) or a batch of shape (N, n)."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    n = arr.shape[1]
    if tf.state_dim is not None and n != tf.state_dim:
        raise ValueError(f"state has dimension {n}, target expects {tf.state_dim}")
    if tf.kind == "custom":
        if n != tf.custom_field.grid.ndim:
            raise ValueError(f"state has dimension {n}, target field is {tf.custom_field.grid.ndim}-D")
        out = interpolate(tf.custom_field, arr, clamp=True)
    else:
        if max(tf.dims) >= n:
            raise ValueError(f"target uses dim {max(tf.dims)} but state has dimension {n}")
        sq = np.zeros(arr.shape[0])
        for d, c in zip(tf.dims, tf.center):
            sq = sq + (arr[:, d] - c) ** 2
        out = np.sqrt(sq) - tf.radius
    return float(out[0]) if single else out


def target_field(tf: TargetFunction, grid: GridSpec, time: float = 0.0) -> ValueField:
    if tf.kind == "custom" and tf.custom_field.grid == grid:
        return ValueField(grid, time, tf.custom_field.values)
    return ValueField(grid, time, eval_target(tf, grid.states()).reshape(grid.shape))


# ---------------------------------------------------------------------------
# interpolation


def _cell_coords(grid: GridSpec, x: np.ndarray):
    """Lower cell index, upper index and fractional offset per dimension."""
    h = grid.spacing
    base, upper, frac = [], [], []
    outside = np.zeros(x.shape[0], dtype=bool)
    for i in range(grid.ndim):
        pts = grid.points[i]
        u = (x[:, i] - grid.lower[i]) / h[i]
        r = np.rint(u)
        u = np.where(np.abs(u - r) < _NODE_SNAP * np.maximum(1.0, np.abs(r)), r, u)
        if grid.periodic[i]:
            u = np.mod(u, pts)
            k = np.floor(u).astype(np.int64)
            k = np.minimum(k, pts - 1)
            t = u - k
            kp = (k + 1) % pts
        else:
            bad = (u < 0) | (u > pts - 1)
            outside |= bad
            u = np.clip(u, 0, pts - 1)
            k = np.minimum(np.floor(u).astype(np.int64), pts - 2)
            t = u - k
            kp = k + 1
        base.append(k)
        upper.append(kp)
        frac.append(t)
    return base, upper, frac, outside


def interpolate_many(grid: GridSpec, arrays, x: np.ndarray):
    """Multilinear interpolation of several grid-shaped arrays at the same
    query points, sharing the cell lookup.  Returns ``(list_of_results, outside)``
    where ``outside`` flags queries that were clamped."""
    base, upper, frac, outside = _cell_coords(grid, x)
    n = grid.ndim
    outs = [np.zeros(x.shape[0]) for _ in arrays]
    for corner in range(1 << n):
        w = np.ones(x.shape[0])
        idx = []
        for i in range(n):
            if corner >> i & 1:
                w = w * frac[i]
                idx.append(upper[i])
            else:
                w = w * (1.0 - frac[i])
                idx.append(base[i])
        idx = tuple(idx)
        for o, a in zip(outs, arrays):
            o += w * a[idx]
    return outs, outside


def _multilinear(grid: GridSpec, values: np.ndarray, x: np.ndarray):
    (out,), outside = interpolate_many(grid, [values], x)
    return out, outside


def interpolate(field: ValueField, x, clamp: bool = False):
    """Multilinear interpolation of ``field`` at one state or a batch.

    Periodic dims wrap.  A query outside a non-periodic dim raises
    :class:`OutOfGridError` (carrying the clamped result) unless ``clamp``.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != field.grid.ndim:
        raise GridError(f"query has dimension {arr.shape[1]}, grid is {field.grid.ndim}-D")
    out, outside = _multilinear(field.grid, field.values, arr)
    if outside.any() and not clamp:
        raise OutOfGridError(f"{int(outside.sum())} queries outside the grid box",
                             clamped=out, outside=outside)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# finite differences


def upwind_pair(values: np.ndarray, grid: GridSpec, dim: int):
    """One-sided differences (p_minus, p_plus) along ``dim``.

    Non-periodic boundaries extrapolate V linearly, which makes both sides
    equal to the inward one-sided difference there.
    """
    h = grid.spacing[dim]
    if grid.periodic[dim]:
        fwd = (np.roll(values, -1, axis=dim) - values) / h
        return np.roll(fwd, 1, axis=dim), fwd
    d = np.diff(values, axis=dim) / h
    first = np.take(d, [0], axis=dim)
    last = np.take(d, [-1], axis=dim)
    p_minus = np.concatenate([first, d], axis=dim)
    p_plus = np.concatenate([d, last], axis=dim)
    return p_minus, p_plus


def gradient(field: ValueField):
    """Central gradient components plus the upwind pairs for every dimension.

    Returns ``(central, minus, plus)``, each a list of ``n`` arrays shaped
    like the grid.
    """
    central, minus, plus = [], [], []
    for i in range(field.grid.ndim):
        pm, pp = upwind_pair(field.values, field.grid, i)
        minus.append(pm)
        plus.append(pp)
        central.append(0.5 * (pm + pp))
    return central, minus, plus


def interpolate_gradient(field: ValueField, x, clamp: bool = False) -> np.ndarray:
    """Central-difference gradient of ``field`` interpolated at ``x`` (shape (N, n))."""
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    central, _, _ = gradient(field)
    cols, outside = interpolate_many(field.grid, central, arr)
    grad = np.stack(cols, axis=1)
    if outside.any() and not clamp:
        raise OutOfGridError(f"{int(outside.sum())} queries outside the grid box",
                             clamped=grad, outside=outside)
    return grad


# ---------------------------------------------------------------------------
# HJVF file format


def field_to_bytes(field: ValueField) -> bytes:
    g = field.grid
    parts = [FIELD_MAGIC, struct.pack("<HI", FIELD_VERSION, g.ndim)]
    for i in range(g.ndim):
        parts.append(struct.pack("<ddIB", g.lower[i], g.upper[i], g.points[i], int(g.periodic[i])))
    parts.append(struct.pack("<d", field.time))
    parts.append(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return b"".join(parts)


def field_from_bytes(data: bytes) -> ValueField:
    if data[:4] != FIELD_MAGIC:
        raise GridError("not a value-field file (bad magic)")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != FIELD_VERSION:
            raise GridError(f"unsupported value-field version {version}")
        off = 10
        lower, upper, points, periodic = [], [], [], []
        for _ in range(n):
            lo, hi, pts, per = struct.unpack_from("<ddIB", data, off)
            off += struct.calcsize("<ddIB")
            lower.append(lo)
            upper.append(hi)
            points.append(pts)
            periodic.append(bool(per))
        (time,) = struct.unpack_from("<d", data, off)
    except struct.error as exc:
        raise GridError("truncated value-field header") from exc
    off += 8
    grid = GridSpec(tuple(lower), tuple(upper), tuple(points), tuple(periodic))
    if off + 8 * grid.size != len(data):
        raise GridError("value-field payload length mismatch")
    values = np.frombuffer(data, dtype="<f8", count=grid.size, offset=off)
    return ValueField(grid, time, values.astype(np.float64))


def save_field(path, field: ValueField) -> None:
    Path(path).write_bytes(field_to_bytes(field))


def load_field(path) -> ValueField:
    return field_from_bytes(Path(path).read_bytes())
