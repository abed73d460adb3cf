import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbreach.statespace import (
    GridError,
    GridSpec,
    OutOfGridError,
    TargetFunction,
    ValueField,
    eval_target,
    field_from_bytes,
    field_to_bytes,
    gradient,
    interpolate,
    interpolate_gradient,
    load_field,
    save_field,
    target_field,
    upwind_pair,
)


def test_grid_spacing_and_periodic_division():
    g = GridSpec((0.0, -math.pi), (1.0, math.pi), (5, 8), (False, True))
    assert np.allclose(g.spacing, [0.25, 2 * math.pi / 8])
    assert g.size == 40
    assert g.states().shape == (40, 2)
    # periodic axis never reaches the upper end
    assert g.axis(1)[-1] < math.pi


@pytest.mark.parametrize("kw", [
    dict(lower=(0.0,), upper=(1.0,), points=(2,)),
    dict(lower=(1.0,), upper=(1.0,), points=(3,)),
    dict(lower=(0.0, 0.0), upper=(1.0,), points=(3, 3)),
])
def test_grid_rejects_bad_specs(kw):
    with pytest.raises(GridError):
        GridSpec(**kw)


def test_value_field_checks():
    g = GridSpec((0.0,), (1.0,), (3,))
    with pytest.raises(GridError):
        ValueField(g, 0.0, [1.0, 2.0])
    with pytest.raises(GridError):
        ValueField(g, 0.0, [1.0, np.nan, 2.0])
    f = ValueField(g, 0.0, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        f.values[0] = 5.0


def test_circle_target_examples():
    tf = TargetFunction.circle(2.5)
    assert eval_target(tf, [0.0, 0.0, 0.3]) == -2.5
    assert eval_target(tf, [2.5, 0.0, 1.0]) == 0.0
    assert eval_target(tf, [3.0, 4.0, 0.0]) == 2.5


def test_target_dimension_mismatch():
    tf = TargetFunction("circle", dims=(0, 1), center=(0, 0), radius=1.0, state_dim=3)
    with pytest.raises(ValueError):
        eval_target(tf, [0.0, 0.0])
    with pytest.raises(ValueError):
        eval_target(TargetFunction.circle(1.0, dims=(0, 4)), [0.0, 0.0, 0.0])


def test_sphere_and_custom_targets():
    sph = TargetFunction("sphere", dims=(0, 1, 2), center=(1.0, 0.0, 0.0), radius=1.0)
    assert eval_target(sph, [1.0, 0.0, 2.0]) == pytest.approx(1.0)
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
    field = ValueField(g, 0.0, np.arange(9.0))
    custom = TargetFunction("custom", custom_field=field)
    assert eval_target(custom, [0.5, 0.5]) == pytest.approx(4.0)
    assert np.array_equal(target_field(custom, g).values, field.values)


def test_interpolation_examples():
    g1 = GridSpec((0.0,), (1.0,), (3,))
    lin = ValueField(g1, 0.0, [0.0, 0.5, 1.0])
    assert interpolate(lin, [0.25]) == pytest.approx(0.25)
    g2 = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
    # f = x + y sampled on the nodes; corner values (0, 1, 1, 2) on the unit square
    vals = g2.states().sum(axis=1)
    bil = ValueField(g2, 0.0, vals)
    assert interpolate(bil, [0.5, 0.5]) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_interpolating_a_constant_gives_the_constant(c, x):
    g = GridSpec((-5.0, -5.0, -math.pi), (5.0, 5.0, math.pi), (4, 5, 6), (False, False, True))
    f = ValueField(g, 0.0, np.full(g.size, c))
    assert interpolate(f, x) == pytest.approx(c, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4 * 5 * 6 - 1))
def test_interpolation_is_exact_at_nodes(k):
    g = GridSpec((-5.0, -5.0, -math.pi), (5.0, 5.0, math.pi), (4, 5, 6), (False, False, True))
    vals = np.random.default_rng(1).normal(size=g.size)
    f = ValueField(g, 0.0, vals)
    assert interpolate(f, g.states([k])[0]) == vals[k]


def test_interpolation_periodic_wrap_and_out_of_bounds():
    g = GridSpec((0.0, -math.pi), (1.0, math.pi), (3, 8), (False, True))
    vals = np.random.default_rng(0).normal(size=g.size)
    f = ValueField(g, 0.0, vals)
    a = interpolate(f, [0.3, 0.5])
    b = interpolate(f, [0.3, 0.5 + 2 * math.pi])
    assert a == pytest.approx(b, abs=1e-12)
    with pytest.raises(OutOfGridError) as info:
        interpolate(f, [1.5, 0.0])
    assert info.value.outside[0]
    assert info.value.clamped[0] == pytest.approx(interpolate(f, [1.0, 0.0]))
    assert interpolate(f, [[1.5, 0.0]], clamp=True)[0] == pytest.approx(interpolate(f, [1.0, 0.0]))


def test_gradient_of_linear_field_is_exact_everywhere():
    g = GridSpec((0.0, 0.0), (2.0, 1.0), (5, 4))
    x = g.states()
    f = ValueField(g, 0.0, 3.0 * x[:, 0] - 2.0 * x[:, 1])
    central, minus, plus = gradient(f)
    for arrs in (central, minus, plus):
        assert np.allclose(arrs[0], 3.0) and np.allclose(arrs[1], -2.0)


def test_upwind_pair_periodic_matches_rolled_difference():
    g = GridSpec((0.0,), (2 * math.pi,), (16,), (True,))
    x = g.states()[:, 0]
    vals = np.sin(x)
    pm, pp = upwind_pair(vals, g, 0)
    h = g.spacing[0]
    assert pp[-1] == pytest.approx((vals[0] - vals[-1]) / h)
    assert pm[0] == pytest.approx((vals[0] - vals[-1]) / h)


def test_interpolated_gradient_of_quadratic():
    g = GridSpec((-1.0, -1.0), (1.0, 1.0), (41, 41))
    x = g.states()
    f = ValueField(g, 0.0, x[:, 0] ** 2 + x[:, 1])
    grad = interpolate_gradient(f, [[0.3, 0.2]])
    assert grad[0] == pytest.approx([0.6, 1.0], abs=2e-3)


def test_field_file_round_trip_is_bit_exact(tmp_path):
    g = GridSpec((-1.0, 0.0, -math.pi), (1.0, 2.0, math.pi), (3, 4, 5), (False, False, True))
    vals = np.random.default_rng(3).normal(size=g.size)
    f = ValueField(g, 0.75, vals)
    data = field_to_bytes(f)
    assert data[:4] == b"HJVF"
    back = field_from_bytes(data)
    assert back.grid == g and back.time == 0.75
    assert back.values.tobytes() == f.values.tobytes()
    p = tmp_path / "v.hjvf"
    save_field(p, f)
    assert p.read_bytes() == data
    assert field_to_bytes(load_field(p)) == data


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-8],
    lambda d: d[:12],
])
def test_field_file_rejects_corruption(mutate):
    g = GridSpec((0.0,), (1.0,), (3,))
    data = field_to_bytes(ValueField(g, 0.0, [1.0, 2.0, 3.0]))
    with pytest.raises(GridError):
        field_from_bytes(mutate(data))
