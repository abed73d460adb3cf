"""2-D slices of value fields: marching-squares level contours and SVG/CSV output."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .statespace import GridSpec, ValueField, eval_target, interpolate


class SliceError(ValueError):
    pass


@dataclass
class Slice2D:
    dims: tuple  # the two free dimensions (row axis, column axis)
    xs: np.ndarray  # coordinates along dims[0]
    ys: np.ndarray  # coordinates along dims[1]
    values: np.ndarray  # (len(xs), len(ys))
    target: np.ndarray | None = None


def take_slice(field: ValueField, fixed: dict, target=None) -> Slice2D:
    """Values on the node lines of the two free dims, other dims pinned at ``fixed``.

    ``fixed`` maps every other dimension index to a coordinate; pinned
    coordinates between nodes are interpolated.
    """
    grid: GridSpec = field.grid
    fixed = {int(k): float(v) for k, v in fixed.items()}
    free = [d for d in range(grid.ndim) if d not in fixed]
    if len(free) != 2 or any(d < 0 or d >= grid.ndim for d in fixed):
        raise SliceError(f"slice must pin all but two of the {grid.ndim} dims, got {sorted(fixed)}")
    xs, ys = grid.axis(free[0]), grid.axis(free[1])
    a, b = np.meshgrid(xs, ys, indexing="ij")
    pts = np.zeros((a.size, grid.ndim))
    pts[:, free[0]] = a.ravel()
    pts[:, free[1]] = b.ravel()
    for d, v in fixed.items():
        pts[:, d] = v
    vals = interpolate(field, pts).reshape(a.shape)
    tvals = None
    if target is not None:
        tvals = np.asarray(eval_target(target, pts)).reshape(a.shape)
    return Slice2D(tuple(free), xs, ys, vals, tvals)


def _edge_point(p, q, vp, vq, level):
    t = (level - vp) / (vq - vp)
    return p + t * (q - p)


def marching_squares(xs, ys, values, level=0.0) -> list:
    """Line segments ((x0, y0), (x1, y1)) of the ``level`` contour.

    A node counts as inside when its value is <= level.  Saddle cells are
    resolved with the cell-centre average.
    """
    v = np.asarray(values, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    segs = []
    inside = v <= level
    for i in range(v.shape[0] - 1):
        for j in range(v.shape[1] - 1):
            # corners counter-clockwise from (i, j)
            c = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            flags = [inside[k] for k in c]
            if all(flags) or not any(flags):
                continue
            pts = [np.array([xs[k[0]], ys[k[1]]]) for k in c]
            vals = [v[k] for k in c]
            cross = []
            for e in range(4):
                f = (e + 1) % 4
                if flags[e] != flags[f]:
                    cross.append((e, _edge_point(pts[e], pts[f], vals[e], vals[f], level)))
            if len(cross) == 2:
                segs.append((tuple(cross[0][1]), tuple(cross[1][1])))
                continue
            # saddle: four crossings; pair them so the centre's side stays connected
            centre_inside = np.mean(vals) <= level
            e_pts = {e: p for e, p in cross}
            if centre_inside == flags[0]:
                pairs = [(0, 1), (2, 3)]
            else:
                pairs = [(3, 0), (1, 2)]
            for a, b in pairs:
                segs.append((tuple(e_pts[a]), tuple(e_pts[b])))
    return segs


def write_slice_csv(path, sl: Slice2D) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [f"x{sl.dims[0]}", f"x{sl.dims[1]}", "V"] + (["l"] if sl.target is not None else [])
        w.writerow(head)
        for i, x in enumerate(sl.xs):
            for j, y in enumerate(sl.ys):
                row = [repr(float(x)), repr(float(y)), repr(float(sl.values[i, j]))]
                if sl.target is not None:
                    row.append(repr(float(sl.target[i, j])))
                w.writerow(row)


def render_svg(sl: Slice2D, size: int = 480) -> str:
    """Grayscale value map with the V = 0 contour (red) and l = 0 contour (blue)."""
    xs, ys, v = sl.xs, sl.ys, sl.values
    x0, x1, y0, y1 = xs[0], xs[-1], ys[0], ys[-1]
    sx = size / (x1 - x0)
    sy = size / (y1 - y0)

    def px(x, y):
        # plot y upwards
        return (x - x0) * sx, size - (y - y0) * sy

    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    # one rectangle per node, centred on it
    wx = np.diff(xs).mean() if len(xs) > 1 else 1.0
    wy = np.diff(ys).mean() if len(ys) > 1 else 1.0
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            g = int(round(255 * (v[i, j] - lo) / span))
            cx, cy = px(x - wx / 2, y + wy / 2)
            out.append(f'<rect x="{cx:.2f}" y="{cy:.2f}" width="{wx * sx:.2f}" height="{wy * sy:.2f}" '
                       f'fill="rgb({g},{g},{g})"/>')
    layers = [(v, "#d62728")]
    if sl.target is not None:
        layers.append((sl.target, "#1f77b4"))
    for arr, colour in layers:
        for (a, b) in marching_squares(xs, ys, arr):
            ax, ay = px(*a)
            bx, by = px(*b)
            out.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" y2="{by:.2f}" '
                       f'stroke="{colour}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
