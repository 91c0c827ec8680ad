"""Deterministic hand-written SVG figures: scatter over density contours,
histogram panels and line plots. Output depends only on the inputs."""
from __future__ import annotations

import os

import numpy as np

_W, _H, _PAD = 420, 420, 40
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, width=_W, height=_H, title=""):
        self.w, self.h = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]
        if title:
            self.text(width / 2, 16, title, anchor="middle", size=13)

    def text(self, x, y, s, anchor="start", size=10):
        s = str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{s}</text>')

    def polyline(self, pts, color, width=1.0):
        if len(pts) < 2:
            return
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"/>')

    def line(self, x0, y0, x1, y1, color="#999999", width=0.8):
        self.parts.append(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="{color}" stroke-width="{width}"/>')

    def circle(self, x, y, r, color, opacity=0.6):
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{r}" fill="{color}" fill-opacity="{opacity}"/>')

    def rect(self, x, y, w, h, color, opacity=0.5):
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{color}" fill-opacity="{opacity}"/>')

    def frame(self, x0, y0, x1, y1):
        self.parts.append(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" height="{_f(y1 - y0)}" fill="none" stroke="black" stroke-width="1"/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Axes:
    def __init__(self, canvas, xlim, ylim, box=None):
        self.c = canvas
        x0, y0, x1, y1 = box or (_PAD, _PAD, canvas.w - _PAD / 2, canvas.h - _PAD)
        self.box = (x0, y0, x1, y1)
        self.xlim, self.ylim = xlim, ylim
        canvas.frame(x0, y0, x1, y1)
        canvas.text(x0, y1 + 14, _f(xlim[0]))
        canvas.text(x1, y1 + 14, _f(xlim[1]), anchor="end")
        canvas.text(x0 - 4, y1, _f(ylim[0]), anchor="end")
        canvas.text(x0 - 4, y0 + 8, _f(ylim[1]), anchor="end")

    def px(self, x, y):
        x0, y0, x1, y1 = self.box
        u = (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        v = (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return x0 + u * (x1 - x0), y1 - v * (y1 - y0)


# --------------------------------------------------------------------------
# marching squares


def marching_squares(z: np.ndarray, xs: np.ndarray, ys: np.ndarray, level: float):
    """Line segments of the ``level`` isocontour of ``z[iy, ix]`` on the grid (xs, ys)."""
    segs = []
    ny, nx = z.shape
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            corners = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)]
            vals = [z[cy, cx] for cx, cy in corners]
            pts = []
            for k in range(4):
                a, b = k, (k + 1) % 4
                va, vb = vals[a], vals[b]
                if (va >= level) != (vb >= level):
                    w = (level - va) / (vb - va)
                    (ax, ay), (bx, by) = corners[a], corners[b]
                    pts.append((xs[ax] + w * (xs[bx] - xs[ax]), ys[ay] + w * (ys[by] - ys[ay])))
            if len(pts) == 2:
                segs.append((pts[0], pts[1]))
            elif len(pts) == 4:
                segs.append((pts[0], pts[1]))
                segs.append((pts[2], pts[3]))
    return segs


def density_grid(energy_fn, bounds, n: int = 200):
    """Normalized-by-construction density exp(-E) on an n x n grid, and the cell area."""
    lo, hi = bounds
    xs = np.linspace(lo, hi, n)
    ys = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(xs, ys)
    e = np.asarray(energy_fn(np.stack([X.ravel(), Y.ravel()], -1))).reshape(n, n)
    return xs, ys, np.exp(-e)


def grid_mass(xs, ys, density) -> float:
    """Trapezoid quadrature of a density tabulated on a rectangular grid."""
    return float(np.trapezoid(np.trapezoid(density, xs, axis=1), ys))


# --------------------------------------------------------------------------
# figures


def scatter_svg(samples: np.ndarray, energy_fn=None, bounds=(-60.0, 60.0), title="", n_levels: int = 6,
                grid: int = 120, max_points: int = 2000) -> str:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty sample set")
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("scatter needs 2-D points")
    c = _Canvas(title=title)
    ax = _Axes(c, bounds, bounds)
    if energy_fn is not None:
        xs, ys, dens = density_grid(energy_fn, bounds, grid)
        logd = np.log(np.maximum(dens, 1e-300))
        top = logd.max()
        for lev in top - np.linspace(1.0, 12.0, n_levels):
            for (p, q) in marching_squares(logd, xs, ys, lev):
                c.polyline([ax.px(*p), ax.px(*q)], "#888888", 0.6)
    lo, hi = bounds
    for px, py in x[:max_points]:
        if lo <= px <= hi and lo <= py <= hi:
            c.circle(*ax.px(px, py), 1.4, _COLORS[0])
    return c.render()


def histogram_svg(series: dict, bins: int = 50, rng=None, title="", xlabel="") -> str:
    """Overlaid normalized histograms of several 1-D value sets."""
    if not series or any(np.asarray(v).size == 0 for v in series.values()):
        raise ValueError("empty sample set")
    allv = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in series.values()])
    lo, hi = rng if rng is not None else (float(allv.min()), float(allv.max()))
    if hi <= lo:
        hi = lo + 1.0
    hists = {k: np.histogram(np.asarray(v).ravel(), bins=bins, range=(lo, hi), density=True)[0] for k, v in series.items()}
    ymax = max(float(h.max()) for h in hists.values()) or 1.0
    c = _Canvas(title=title)
    ax = _Axes(c, (lo, hi), (0.0, ymax * 1.05))
    edges = np.linspace(lo, hi, bins + 1)
    for i, (name, h) in enumerate(hists.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = []
        for j in range(bins):
            pts += [ax.px(edges[j], h[j]), ax.px(edges[j + 1], h[j])]
        c.polyline(pts, color, 1.2)
        c.text(ax.box[2] - 4, ax.box[1] + 14 * (i + 1), name, anchor="end")
    if xlabel:
        c.text((ax.box[0] + ax.box[2]) / 2, c.h - 8, xlabel, anchor="middle")
    return c.render()


def line_svg(xs, series: dict, title="", xlabel="", logy=False) -> str:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("empty input")
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    if logy:
        ys = {k: np.log10(np.maximum(v, 1e-300)) for k, v in ys.items()}
    allv = np.concatenate(list(ys.values()))
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1.0
    c = _Canvas(title=title)
    ax = _Axes(c, (float(xs.min()), float(xs.max())), (lo, hi))
    for i, (name, v) in enumerate(ys.items()):
        color = _COLORS[i % len(_COLORS)]
        c.polyline([ax.px(a, b) for a, b in zip(xs, v)], color, 1.4)
        c.text(ax.box[2] - 4, ax.box[1] + 14 * (i + 1), name + (" (log10)" if logy else ""), anchor="end")
    if xlabel:
        c.text((ax.box[0] + ax.box[2]) / 2, c.h - 8, xlabel, anchor="middle")
    return c.render()


def write_svg(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
