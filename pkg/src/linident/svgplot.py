"""Minimal standalone SVG line and scatter plots for experiment tables."""

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 320, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(values, lo_px, hi_px):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: lo_px + (np.asarray(v, dtype=np.float64) - lo) / (hi - lo) * (hi_px - lo_px), (lo, hi)


def _frame(title, xlabel, ylabel, xr, yr):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="{PAD}" y="{PAD // 2}" width="{WIDTH - 1.5 * PAD}" height="{HEIGHT - 1.5 * PAD}" fill="none" stroke="#444"/>',
        f'<text x="{WIDTH / 2}" y="14" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 6}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{HEIGHT / 2}" transform="rotate(-90 12 {HEIGHT / 2})" text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{HEIGHT - PAD + 14}">{xr[0]:.3g}</text>',
        f'<text x="{WIDTH - PAD / 2}" y="{HEIGHT - PAD + 14}" text-anchor="end">{xr[1]:.3g}</text>',
        f'<text x="{PAD - 4}" y="{HEIGHT - PAD}" text-anchor="end">{yr[0]:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD // 2 + 10}" text-anchor="end">{yr[1]:.3g}</text>',
    ]


def line_plot(path, x, series, title="", xlabel="", ylabel=""):
    """`series` maps a legend label to a y sequence aligned with `x`."""
    all_y = np.concatenate([np.asarray(y, dtype=np.float64) for y in series.values()])
    sx, xr = _scale(x, PAD, WIDTH - PAD / 2)
    sy, yr = _scale(all_y, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, xr, yr)
    for i, (label, y) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(sx(x), sy(y)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{PAD + 6}" y="{PAD // 2 + 14 + 13 * i}" fill="{color}">{escape(str(label))}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def scatter_plot(path, groups, title="", xlabel="", ylabel=""):
    """`groups` maps a legend label to an (n, 2) array of points."""
    pts = np.vstack([np.asarray(p, dtype=np.float64) for p in groups.values()])
    sx, xr = _scale(pts[:, 0], PAD, WIDTH - PAD / 2)
    sy, yr = _scale(pts[:, 1], HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, xr, yr)
    for i, (label, p) in enumerate(groups.items()):
        color = PALETTE[i % len(PALETTE)]
        p = np.asarray(p, dtype=np.float64)
        for a, b in zip(sx(p[:, 0]), sy(p[:, 1])):
            parts.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}" fill-opacity="0.7"/>')
        parts.append(f'<text x="{PAD + 6}" y="{PAD // 2 + 14 + 13 * i}" fill="{color}">{escape(str(label))}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
