"""Tiny dependency-free SVG emitter for attention heatmaps and line traces.

The colormap is a fixed five-anchor approximation of viridis, linearly
interpolated; output bytes are deterministic for identical inputs.
"""

from __future__ import annotations

import numpy as np

_ANCHORS = np.array([
    (68, 1, 84),      # dark purple
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),   # yellow
], dtype=np.float64)


def colormap(x: np.ndarray) -> np.ndarray:
    """Map values in [0,1] to RGB rows via the fixed anchor palette."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    pos = x * (len(_ANCHORS) - 1)
    i = np.minimum(pos.astype(int), len(_ANCHORS) - 2)
    frac = (pos - i)[..., None]
    rgb = _ANCHORS[i] * (1 - frac) + _ANCHORS[i + 1] * frac
    return rgb.astype(int)


def _heatmap_rects(matrix: np.ndarray, x0: float, y0: float, cell: float) -> list:
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    norm = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    rgb = colormap(norm)
    rows = []
    for r in range(m.shape[0]):
        for c in range(m.shape[1]):
            col = rgb[r, c]
            rows.append(
                f'<rect x="{x0 + c * cell:.2f}" y="{y0 + r * cell:.2f}" '
                f'width="{cell:.2f}" height="{cell:.2f}" '
                f'fill="rgb({col[0]},{col[1]},{col[2]})"/>')
    return rows


def _trace_polyline(values: np.ndarray, x0: float, y0: float,
                    width: float, height: float) -> str:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    n = len(v)
    pts = []
    for i, val in enumerate(v):
        x = x0 + (i / max(1, n - 1)) * width
        y = y0 + height - ((val - lo) / span) * height
        pts.append(f"{x:.2f},{y:.2f}")
    return (f'<polyline points="{" ".join(pts)}" fill="none" '
            f'stroke="rgb(33,145,140)" stroke-width="1.5"/>')


def render_panel(maps, envelope=None, path=None, panel_px: float = 160.0,
                 pad: float = 28.0) -> str:
    """Lay out (title, matrix) heatmaps in a row, plus an optional trace.

    Returns the SVG text; writes it to ``path`` when given.
    """
    n = len(maps) + (1 if envelope is not None else 0)
    width = pad + n * (panel_px + pad)
    height = panel_px + 2 * pad + 14
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect x="0" y="0" width="{width:.0f}" height="{height:.0f}" '
        f'fill="white"/>',
    ]
    x = pad
    for title, matrix in maps:
        m = np.asarray(matrix)
        cell = panel_px / max(m.shape[0], m.shape[1], 1)
        parts.append(f'<text x="{x:.2f}" y="{pad - 8:.2f}" '
                     f'font-family="monospace" font-size="10">{title}</text>')
        parts.extend(_heatmap_rects(m, x, pad, cell))
        x += panel_px + pad
    if envelope is not None:
        parts.append(f'<text x="{x:.2f}" y="{pad - 8:.2f}" '
                     f'font-family="monospace" font-size="10">envelope</text>')
        parts.append(_trace_polyline(envelope, x, pad, panel_px, panel_px))
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        from pathlib import Path
        Path(path).write_text(svg, encoding="utf-8")
    return svg
