"""Minimal hand-written SVG figures: line plots with shaded bands and heatmaps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


@dataclass
class Series:
    x: Sequence[float]
    y: Sequence[float]
    label: str = ""
    band: tuple | None = None  # (lower, upper)
    dashed: bool = False
    color: str | None = None


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    return np.arange(math.ceil(lo / step) * step, hi + 1e-9 * step, step)


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{MARGIN["left"] + (WIDTH - MARGIN["left"] - MARGIN["right"]) / 2}" '
        f'y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">'
        f"{escape(ylabel)}</text>",
    ]


def line_plot(
    path: str | Path,
    series: Sequence[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logx: bool = False,
) -> None:
    """Write a line plot; ``band`` draws a shaded region behind its series."""
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    tx = (lambda v: np.log10(v)) if logx else (lambda v: np.asarray(v, dtype=float))
    xs = np.concatenate([tx(np.asarray(s.x, dtype=float)) for s in series])
    ys = [np.asarray(s.y, dtype=float) for s in series]
    ys += [np.asarray(b, dtype=float) for s in series if s.band is not None for b in s.band]
    yall = np.concatenate(ys)
    yall = yall[np.isfinite(yall)]
    xlo, xhi = float(xs.min()), float(xs.max())
    ylo, yhi = float(yall.min()), float(yall.max())
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        yhi = ylo + 1.0
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(v):
        return x0 + (tx(v) - xlo) / (xhi - xlo) * (x1 - x0)

    def py(v):
        return y0 - (np.asarray(v, dtype=float) - ylo) / (yhi - ylo) * (y0 - y1)

    out = _frame(title, xlabel, ylabel)
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
    for t in _ticks(ylo, yhi):
        yy = py(t)
        out.append(f'<line x1="{x0 - 4}" y1="{yy:.2f}" x2="{x0}" y2="{yy:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{yy + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    for t in _ticks(xlo, xhi):
        xx = x0 + (t - xlo) / (xhi - xlo) * (x1 - x0)
        lab = _fmt(10**t) if logx else _fmt(t)
        out.append(f'<line x1="{xx:.2f}" y1="{y0}" x2="{xx:.2f}" y2="{y0 + 4}" stroke="black"/>')
        out.append(f'<text x="{xx:.2f}" y="{y0 + 18}" text-anchor="middle">{lab}</text>')
    for k, s in enumerate(series):
        color = s.color or PALETTE[k % len(PALETTE)]
        xv = np.asarray(s.x, dtype=float)
        if s.band is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in s.band)
            pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xv, hi)]
            pts += [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xv[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xv, s.y))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>')
        if s.label:
            ly = y1 + 16 + 18 * k
            out.append(f'<line x1="{x1 + 10}" y1="{ly - 4}" x2="{x1 + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{x1 + 35}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _color(v: float) -> str:
    """Blue-white-red ramp on ``[0, 1]``."""
    v = min(max(v, 0.0), 1.0)
    if v < 0.5:
        a = v / 0.5
        r, g, b = int(40 + 215 * a), int(80 + 175 * a), 255
    else:
        a = (v - 0.5) / 0.5
        r, g, b = 255, int(255 - 200 * a), int(255 - 215 * a)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(path: str | Path, matrix, title: str = "", vmin: float | None = None, vmax: float | None = None) -> None:
    """Write a matrix as a grid of colored cells (row 0 at the top)."""
    A = np.asarray(matrix, dtype=float)
    finite = A[np.isfinite(A)]
    lo = float(finite.min()) if vmin is None else vmin
    hi = float(finite.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    n_r, n_c = A.shape
    size = 360
    cw, ch = size / n_c, size / n_r
    ox, oy = 60, 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size + 80}" font-family="sans-serif" font-size="12">',
        f'<rect width="{size + 160}" height="{size + 80}" fill="white"/>',
        f'<text x="{ox + size / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for i in range(n_r):
        for j in range(n_c):
            v = A[i, j]
            fill = _color((v - lo) / span) if np.isfinite(v) else "#000000"
            out.append(
                f'<rect x="{ox + j * cw:.2f}" y="{oy + i * ch:.2f}" width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" fill="{fill}"/>'
            )
    for k in range(11):
        v = k / 10
        out.append(f'<rect x="{ox + size + 20}" y="{oy + size - (k + 1) * size / 11:.2f}" width="18" height="{size / 11 + 0.5:.2f}" fill="{_color(v)}"/>')
    out.append(f'<text x="{ox + size + 44}" y="{oy + size}">{_fmt(lo)}</text>')
    out.append(f'<text x="{ox + size + 44}" y="{oy + 10}">{_fmt(hi)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
