"""Black-box step interface and the built-in reference systems.

Every system exposes only ``step(x, u) -> x_next`` over a fixed step size and
its control box.  The built-ins integrate a hidden right-hand side with RK4;
that right-hand side is reachable for tests through :mod:`bbreach.oracle`
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DynamicsError(RuntimeError):
    pass


class ControlOutOfBoundsError(DynamicsError):
    pass


class NonFiniteStateError(DynamicsError):
    pass


@dataclass(frozen=True, eq=False)
class ControlBox:
    """Axis-aligned box ``[center - half_width, center + half_width]``."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float)).copy()
        w = np.atleast_1d(np.asarray(self.half_width, dtype=float)).copy()
        if c.shape != w.shape or c.ndim != 1:
            raise ValueError("center and half_width must be vectors of equal length")
        if not np.all(w > 0):
            raise ValueError("half widths must be positive")
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", w)

    @classmethod
    def from_bounds(cls, low, high):
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        return cls((low + high) / 2, (high - low) / 2)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def low(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def high(self) -> np.ndarray:
        return self.center + self.half_width

    def corners(self) -> np.ndarray:
        """All 2**n_u corners; binary counting with dimension 0 least significant."""
        m = self.dim
        bits = (np.arange(1 << m)[:, None] >> np.arange(m)[None, :]) & 1
        return np.where(bits == 1, self.high, self.low)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random((count, self.dim))

    def contains(self, u) -> np.ndarray:
        u = np.atleast_2d(u)
        return np.all((u >= self.low) & (u <= self.high), axis=1)

    def normalize(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.center) / self.half_width

    def denormalize(self, z) -> np.ndarray:
        return self.center + self.half_width * np.clip(z, -1.0, 1.0)

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    delta: float
    x_next: np.ndarray

    @property
    def flow(self) -> np.ndarray:
        return (self.x_next - self.x) / self.delta


class BlackBoxSystem:
    """Opaque deterministic simulator advancing a state by ``step_size`` seconds.

    ``step`` accepts a single state/control or batches of shape (N, n) and
    (N, n_u); a single pair returns a single state.
    """

    name = "blackbox"
    state_dim: int
    control_box: ControlBox
    step_size: float

    def step(self, x, u):
        raise NotImplementedError

    @property
    def control_dim(self) -> int:
        return self.control_box.dim

    def _check_inputs(self, x, u):
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        us = np.atleast_2d(np.asarray(u, dtype=float))
        if xs.shape[1] != self.state_dim:
            raise ValueError(f"state has dimension {xs.shape[1]}, system expects {self.state_dim}")
        if us.shape[1] != self.control_dim:
            raise ValueError(f"control has dimension {us.shape[1]}, system expects {self.control_dim}")
        if us.shape[0] != xs.shape[0]:
            if us.shape[0] == 1:
                us = np.broadcast_to(us, (xs.shape[0], us.shape[1]))
            elif xs.shape[0] == 1:
                xs = np.broadcast_to(xs, (us.shape[0], xs.shape[1]))
            else:
                raise ValueError("state and control batches differ in length")
        if not np.all(np.isfinite(xs)):
            raise NonFiniteStateError("state is not finite")
        inside = self.control_box.contains(us)
        if not inside.all():
            bad = us[~inside][0]
            raise ControlOutOfBoundsError(f"control {bad.tolist()} outside the control box")
        return xs, us

    def transition(self, x, u) -> Transition:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return Transition(x, u, self.step_size, np.asarray(self.step(x, u)))


def flow_estimate(sys: BlackBoxSystem, x, u) -> np.ndarray:
    """(step(x, u) - x) / step_size, the finite-difference surrogate for f(x, u)."""
    x = np.asarray(x, dtype=float)
    return (np.asarray(sys.step(x, u)) - x) / sys.step_size


class CountingSystem(BlackBoxSystem):
    """Wraps a system and counts individual step queries (one per batch row)."""

    def __init__(self, inner: BlackBoxSystem):
        self.inner = inner
        self.name = inner.name
        self.state_dim = inner.state_dim
        self.control_box = inner.control_box
        self.step_size = inner.step_size
        self.queries = 0

    def step(self, x, u):
        out = self.inner.step(x, u)
        self.queries += 1 if np.ndim(out) == 1 else np.shape(out)[0]
        return out


# ---------------------------------------------------------------------------
# built-in systems


class BuiltinSystem(BlackBoxSystem):
    """RK4 integration of a hidden vector field, ``substeps`` per step."""

    substeps = 1
    control_affine = False

    def step(self, x, u):
        single = np.ndim(x) == 1 and np.ndim(u) == 1
        xs, us = self._check_inputs(x, u)
        h = self.step_size / self.substeps
        y = np.array(xs, dtype=float)
        for _ in range(self.substeps):
            k1 = self._rhs(y, us)
            k2 = self._rhs(y + 0.5 * h * k1, us)
            k3 = self._rhs(y + 0.5 * h * k2, us)
            k4 = self._rhs(y + h * k3, us)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteStateError("simulator produced a non-finite state")
        return y[0] if single else y

    def _rhs(self, x, u):
        raise NotImplementedError

    # control-affine systems split f = drift(x) + input_matrix(x) @ u
    def _affine_parts(self, x):
        raise NotImplementedError


class Bicycle5D(BuiltinSystem):
    """Kinematic bicycle; state (p_x, p_y, v, heading, steering), control (a, omega)."""

    name = "bicycle"
    state_dim = 5
    control_affine = True

    def __init__(self, wheelbase=1.0, accel_max=2.0, steer_rate_max=2.0, step_size=0.001, substeps=1):
        self.wheelbase = float(wheelbase)
        self.control_box = ControlBox([0.0, 0.0], [accel_max, steer_rate_max])
        self.step_size = float(step_size)
        self.substeps = int(substeps)

    def _affine_parts(self, x):
        v, phi, delta = x[:, 2], x[:, 3], x[:, 4]
        drift = np.zeros_like(x)
        drift[:, 0] = v * np.cos(phi)
        drift[:, 1] = v * np.sin(phi)
        drift[:, 3] = v / self.wheelbase * np.tan(delta)
        gain = np.zeros(x.shape + (2,))
        gain[:, 2, 0] = 1.0
        gain[:, 4, 1] = 1.0
        return drift, gain

    def _rhs(self, x, u):
        v, phi, delta = x[:, 2], x[:, 3], x[:, 4]
        out = np.empty_like(x)
        out[:, 0] = v * np.cos(phi)
        out[:, 1] = v * np.sin(phi)
        out[:, 2] = u[:, 0]
        out[:, 3] = v / self.wheelbase * np.tan(delta)
        out[:, 4] = u[:, 1]
        return out


class Dubins3D(BuiltinSystem):
    """Constant-speed Dubins car; state (p_x, p_y, heading), control turn rate."""

    name = "dubins"
    state_dim = 3
    control_affine = True

    def __init__(self, speed=1.0, turn_rate_max=1.0, step_size=0.001, substeps=1):
        self.speed = float(speed)
        self.control_box = ControlBox([0.0], [turn_rate_max])
        self.step_size = float(step_size)
        self.substeps = int(substeps)

    def _affine_parts(self, x):
        drift = np.zeros_like(x)
        drift[:, 0] = self.speed * np.cos(x[:, 2])
        drift[:, 1] = self.speed * np.sin(x[:, 2])
        gain = np.zeros(x.shape + (1,))
        gain[:, 2, 0] = 1.0
        return drift, gain

    def _rhs(self, x, u):
        out = np.empty_like(x)
        out[:, 0] = self.speed * np.cos(x[:, 2])
        out[:, 1] = self.speed * np.sin(x[:, 2])
        out[:, 2] = u[:, 0]
        return out


class FrozenSystem(BuiltinSystem):
    """f = 0 for every state and control (a stationary test double)."""

    name = "frozen"
    control_affine = True

    def __init__(self, state_dim=2, control_dim=1, step_size=0.001):
        self.state_dim = int(state_dim)
        self.control_box = ControlBox(np.zeros(control_dim), np.ones(control_dim))
        self.step_size = float(step_size)

    def _affine_parts(self, x):
        return np.zeros_like(x), np.zeros(x.shape + (self.control_dim,))

    def _rhs(self, x, u):
        return np.zeros_like(x)


# Fixture constants for the slip-wheel car.  Only the control bounds come from
# the published setup; mass, inertia, geometry, cornering stiffness and the
# friction coefficients are chosen so that braking hard while steering hard
# leaves the friction cone.
SLIPWHEEL_PARAMS = {
    "mass": 1964.0,          # kg
    "yaw_inertia": 2900.0,   # kg m^2
    "front_arm": 1.4,        # m, CG to front axle
    "rear_arm": 1.6,         # m, CG to rear axle
    "stiffness_front": 180000.0,  # N/rad
    "stiffness_rear": 210000.0,   # N/rad
    "mu": 1.0,               # static (peak) friction
    "mu_slide": 0.8,         # kinetic friction once the cone is exceeded
    "gravity": 9.81,
}


class SlipWheel6D(BuiltinSystem):
    """Single-track car with Fiala tyres and a friction-cone sliding switch.

    State (p_x, p_y, yaw, U_x, U_y, yaw_rate); control (steer, F_x).  The
    longitudinal force is split between axles by static load.  When an axle's
    demanded force leaves the cone ``Fx^2 + Fy^2 > (mu Fz)^2`` the tyre slides
    and delivers ``mu_slide * Fz`` along the demanded direction instead.  The
    switch makes the system non-control-affine.
    """

    name = "slipwheel"
    state_dim = 6

    def __init__(self, step_size=0.002, substeps=1, params=None):
        self.params = dict(SLIPWHEEL_PARAMS if params is None else params)
        self.control_box = ControlBox.from_bounds([-np.pi / 10, -18794.0], [np.pi / 10, 5600.0])
        self.step_size = float(step_size)
        self.substeps = int(substeps)
        p = self.params
        wb = p["front_arm"] + p["rear_arm"]
        weight = p["mass"] * p["gravity"]
        self._fz_front = weight * p["rear_arm"] / wb
        self._fz_rear = weight * p["front_arm"] / wb

    def _fiala(self, slip, stiffness, fz):
        mu = self.params["mu"]
        t = np.tan(slip)
        t_sl = 3.0 * mu * fz / stiffness
        c = stiffness
        lin = -c * t + c * c / (3 * mu * fz) * np.abs(t) * t - c ** 3 / (27 * mu * mu * fz * fz) * t ** 3
        return np.where(np.abs(t) < t_sl, lin, -mu * fz * np.sign(slip))

    def _tyre_forces(self, x, u):
        p = self.params
        ux, uy, r = x[:, 3], x[:, 4], x[:, 5]
        steer, fx = u[:, 0], u[:, 1]
        a, b = p["front_arm"], p["rear_arm"]
        fz_f, fz_r = self._fz_front, self._fz_rear
        share = fz_f / (fz_f + fz_r)
        slip_f = np.arctan2(uy + a * r, ux) - steer
        slip_r = np.arctan2(uy - b * r, ux)
        fy_f = self._fiala(slip_f, p["stiffness_front"], fz_f)
        fy_r = self._fiala(slip_r, p["stiffness_rear"], fz_r)
        fx_f = fx * share
        fx_r = fx * (1.0 - share)
        out = []
        for fxi, fyi, fz in ((fx_f, fy_f, fz_f), (fx_r, fy_r, fz_r)):
            mag = np.hypot(fxi, fyi)
            sliding = mag > p["mu"] * fz
            scale = np.where(sliding, p["mu_slide"] * fz / np.where(mag > 0, mag, 1.0), 1.0)
            out.append((fxi * scale, fyi * scale, sliding))
        return out

    def _rhs(self, x, u):
        p = self.params
        (fxf, fyf, _), (fxr, fyr, _) = self._tyre_forces(x, u)
        yaw, ux, uy, r = x[:, 2], x[:, 3], x[:, 4], x[:, 5]
        steer = u[:, 0]
        cs, sn = np.cos(steer), np.sin(steer)
        front_long = fxf * cs - fyf * sn
        front_lat = fyf * cs + fxf * sn
        out = np.empty_like(x)
        out[:, 0] = ux * np.cos(yaw) - uy * np.sin(yaw)
        out[:, 1] = ux * np.sin(yaw) + uy * np.cos(yaw)
        out[:, 2] = r
        out[:, 3] = (front_long + fxr) / p["mass"] + r * uy
        out[:, 4] = (front_lat + fyr) / p["mass"] - r * ux
        out[:, 5] = (p["front_arm"] * front_lat - p["rear_arm"] * fyr) / p["yaw_inertia"]
        return out

    def _sliding(self, x, u):
        (_, _, front), (_, _, rear) = self._tyre_forces(x, u)
        return front, rear


BUILTIN_SYSTEMS = {
    "bicycle": Bicycle5D,
    "dubins": Dubins3D,
    "slipwheel": SlipWheel6D,
    "frozen": FrozenSystem,
}


def make_system(name: str, **kwargs) -> BuiltinSystem:
    try:
        cls = BUILTIN_SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown built-in system {name!r}") from None
    return cls(**kwargs)
