import csv

import numpy as np
import pytest

from bbreach.contour import SliceError, marching_squares, render_svg, take_slice, write_slice_csv
from bbreach.statespace import TargetFunction, ValueField, interpolate, target_field
from conftest import dubins_grid


def test_contour_points_lie_on_the_zero_level(dubins_small_solve, circle):
    _, grid, series = dubins_small_solve
    field = series.initial()
    sl = take_slice(field, {2: 0.3}, target=circle)
    segs = marching_squares(sl.xs, sl.ys, sl.values)
    assert len(segs) > 10
    h = grid.spacing[:2].max()
    pts = np.array([p for s in segs for p in s])
    full = np.column_stack([pts, np.full(len(pts), 0.3)])
    # the bilinear surface crosses zero within a cell of each point
    assert np.all(np.abs(interpolate(field, full)) < h)


def test_circle_contour_radius():
    grid = dubins_grid(41)
    tf = TargetFunction.circle(2.5)
    sl = take_slice(target_field(tf, grid), {2: 0.0})
    segs = marching_squares(sl.xs, sl.ys, sl.values)
    r = np.hypot(*np.array([p for s in segs for p in s]).T)
    # l is exact at nodes and linear along edges, so crossings sit within a cell of the circle
    assert np.all(np.abs(r - 2.5) < grid.spacing[0])


def test_constant_field_has_no_contour():
    grid = dubins_grid(11)
    sl = take_slice(ValueField(grid, 0.0, np.ones(grid.size)), {0: 0.0})
    assert sl.dims == (1, 2)
    assert marching_squares(sl.xs, sl.ys, sl.values) == []
    assert marching_squares(sl.xs, sl.ys, -sl.values) == []


def test_saddle_cell_gives_two_segments():
    v = np.array([[-1.0, 1.0], [1.0, -1.0]])
    segs = marching_squares([0.0, 1.0], [0.0, 1.0], v)
    assert len(segs) == 2


def test_bad_slices_are_rejected():
    field = ValueField(dubins_grid(11), 0.0, np.zeros(11 ** 3))
    with pytest.raises(SliceError):
        take_slice(field, {})
    with pytest.raises(SliceError):
        take_slice(field, {0: 0.0, 1: 0.0})
    with pytest.raises(SliceError):
        take_slice(field, {5: 0.0})


def test_slice_csv_and_svg(tmp_path, dubins_small_solve, circle):
    _, _, series = dubins_small_solve
    sl = take_slice(series.initial(), {2: 0.0}, target=circle)
    path = tmp_path / "s.csv"
    write_slice_csv(path, sl)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x0", "x1", "V", "l"]
    assert len(rows) == 1 + sl.values.size
    assert float(rows[1][2]) == sl.values[0, 0]
    svg = render_svg(sl)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") == sl.values.size
    assert 'stroke="#d62728"' in svg and 'stroke="#1f77b4"' in svg
