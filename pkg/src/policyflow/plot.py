"""Minimal SVG scatter plots (800x800, axes fit to the data with a 5% margin)."""
from __future__ import annotations

import numpy as np

SIZE = 800
COLORS = ("#1f77b4", "#d62728")


def scatter_svg(samples, overlay=None, title: str = "") -> str:
    sets = [np.atleast_2d(np.asarray(samples, dtype=np.float64))[:, :2]]
    if overlay is not None:
        sets.append(np.atleast_2d(np.asarray(overlay, dtype=np.float64))[:, :2])
    if any(s.shape[1] < 2 for s in sets):
        # 1D data: plot against zero
        sets = [np.column_stack([s[:, 0], np.zeros(len(s))]) if s.shape[1] < 2 else s for s in sets]
    allpts = np.concatenate(sets)
    lo, hi = allpts.min(0), allpts.max(0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    scale = SIZE / (hi - lo)

    def px(p):
        return (p[:, 0] - lo[0]) * scale[0], SIZE - (p[:, 1] - lo[1]) * scale[1]

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
           f'viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>']
    # reference set first so the samples draw on top
    for k in reversed(range(len(sets))):
        xs, ys = px(sets[k])
        out.append(f'<g fill="{COLORS[k]}" fill-opacity="0.5">')
        out.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2"/>' for x, y in zip(xs, ys))
        out.append("</g>")
    if title:
        out.append(f'<text x="10" y="20" font-family="sans-serif" font-size="14">{title}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_scatter(path: str, samples, overlay=None, title: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(scatter_svg(samples, overlay, title))
