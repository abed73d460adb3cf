"""Test-only access to the hidden right-hand sides of the built-in systems.

Nothing on the black-box path (sampling providers, learning, solver,
policies) imports this module.  The analytic Hamiltonian provider uses it as
the ground-truth baseline.
"""

from __future__ import annotations

import numpy as np

from .dynamics import BlackBoxSystem, BuiltinSystem


class OracleUnavailableError(TypeError):
    pass


def _builtin(sys: BlackBoxSystem) -> BuiltinSystem:
    if not isinstance(sys, BuiltinSystem):
        raise OracleUnavailableError(f"{type(sys).__name__} does not expose its vector field")
    return sys


def true_rhs(sys: BlackBoxSystem, x, u) -> np.ndarray:
    """f(x, u) for a built-in system (single pair or batch)."""
    b = _builtin(sys)
    single = np.ndim(x) == 1
    xs, us = b._check_inputs(x, u)
    out = b._rhs(np.array(xs), np.array(us))
    return out[0] if single else out


def affine_parts(sys: BlackBoxSystem, x):
    """(drift, input_matrix) with f(x, u) = drift + input_matrix @ u, batched."""
    b = _builtin(sys)
    if not b.control_affine:
        raise OracleUnavailableError(f"{b.name} is not control-affine")
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    return b._affine_parts(xs)


def sliding_flags(sys: BlackBoxSystem, x, u):
    """(front, rear) friction-cone exceedance flags of the slip-wheel car."""
    b = _builtin(sys)
    if not hasattr(b, "_sliding"):
        raise OracleUnavailableError(f"{b.name} has no tyre model")
    xs, us = b._check_inputs(x, u)
    return b._sliding(np.array(xs), np.array(us))
