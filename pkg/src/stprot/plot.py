"""Static SVG scatter plots of spots, colored by cluster label or by a value."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

SIZE = 480
MARGIN = 24
LEGEND_W = 120

# categorical palette (Tableau 10)
PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
)
# sequential ramp anchors, low to high
RAMP = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))


def _ramp(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(RAMP) - 1)
    i = min(int(t), len(RAMP) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(RAMP[i], RAMP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _layout(coords: np.ndarray):
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = float(max((hi - lo).max(), 1e-12))
    scale = (SIZE - 2 * MARGIN) / span
    px = MARGIN + (coords[:, 0] - lo[0]) * scale
    # image y grows downward; flip so larger y sits higher
    py = SIZE - MARGIN - (coords[:, 1] - lo[1]) * scale
    radius = max(1.5, min(6.0, 0.45 * scale * _spacing(coords)))
    return px, py, radius


def _spacing(coords: np.ndarray) -> float:
    # typical nearest-neighbour distance, on a subsample for large inputs
    sub = coords[:: max(1, len(coords) // 500)]
    if len(sub) < 2:
        return 1.0
    d2 = ((sub[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    d2[d2 == 0] = np.inf
    nn = np.sqrt(d2.min(axis=1))
    nn = nn[np.isfinite(nn)]
    return float(np.median(nn)) if nn.size else 1.0


def _svg(circles: list[str], legend: list[str], title: str) -> str:
    width = SIZE + LEGEND_W
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SIZE}" '
        f'viewBox="0 0 {width} {SIZE}">\n'
        f'<rect width="{width}" height="{SIZE}" fill="white"/>\n'
        f'<text x="{MARGIN}" y="16" font-family="sans-serif" font-size="12">{escape(title)}</text>\n'
    )
    return head + "".join(circles) + "".join(legend) + "</svg>\n"


def scatter_labels(coords, labels: Sequence, title: str = "") -> str:
    px, py, r = _layout(coords)
    labels = [str(v) for v in labels]
    classes = sorted(set(labels))
    color = {c: PALETTE[i % len(PALETTE)] for i, c in enumerate(classes)}
    circles = [
        f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color[c]}"/>\n'
        for x, y, c in zip(px, py, labels)
    ]
    legend = []
    for i, c in enumerate(classes[:30]):
        y = MARGIN + 16 * i
        legend.append(
            f'<circle cx="{SIZE + 10}" cy="{y}" r="5" fill="{color[c]}"/>'
            f'<text x="{SIZE + 20}" y="{y + 4}" font-family="sans-serif" font-size="11">{escape(c)}</text>\n'
        )
    return _svg(circles, legend, title)


def scatter_values(coords, values, title: str = "") -> str:
    values = np.asarray(values, dtype=np.float64)
    px, py, r = _layout(coords)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    circles = [
        f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{_ramp((v - lo) / span)}"/>\n'
        for x, y, v in zip(px, py, values)
    ]
    legend = []
    for i in range(5):
        t = 1.0 - i / 4
        y = MARGIN + 16 * i
        legend.append(
            f'<rect x="{SIZE + 5}" y="{y - 5}" width="10" height="10" fill="{_ramp(t)}"/>'
            f'<text x="{SIZE + 20}" y="{y + 4}" font-family="sans-serif" font-size="11">{lo + t * span:.3g}</text>\n'
        )
    return _svg(circles, legend, title)


__all__ = ["scatter_labels", "scatter_values"]
