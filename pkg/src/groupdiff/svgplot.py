"""Minimal SVG line plots, written directly (no plotting dependency).

Good enough for loss curves, attention-over-step profiles, and sweep
results; output is deterministic text.
"""

from __future__ import annotations

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot_svg(series: dict[str, tuple], path, title: str = "",
                  x_label: str = "", y_label: str = "",
                  width: int = 640, height: int = 400) -> None:
    """series: name -> (xs, ys). Writes an SVG file with one polyline each."""
    pad_l, pad_r, pad_t, pad_b = 56, 16, 28, 40
    plot_w = width - pad_l - pad_r
    plot_h = height - pad_t - pad_b
    all_x = np.concatenate([np.asarray(xs, float) for xs, _ in series.values()])
    all_y = np.concatenate([np.asarray(ys, float) for _, ys in series.values()])
    x0, x1 = float(all_x.min()), float(all_x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * plot_w

    def sy(y):
        return pad_t + plot_h - (y - y0) / (y1 - y0) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + plot_h}" x2="{pad_l + plot_w}" '
        f'y2="{pad_t + plot_h}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + plot_h}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">{y_label}</text>',
        f'<text x="{pad_l - 4}" y="{pad_t + plot_h + 4}" text-anchor="end" '
        f'font-size="10">{y0:.4g}</text>',
        f'<text x="{pad_l - 4}" y="{pad_t + 10}" text-anchor="end" font-size="10">{y1:.4g}</text>',
        f'<text x="{pad_l}" y="{pad_t + plot_h + 14}" font-size="10">{x0:.4g}</text>',
        f'<text x="{pad_l + plot_w}" y="{pad_t + plot_h + 14}" text-anchor="end" '
        f'font-size="10">{x1:.4g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points}"/>')
        parts.append(f'<text x="{pad_l + plot_w - 4}" y="{pad_t + 14 + 14 * i}" '
                     f'text-anchor="end" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
        f.write("\n")
