"""Minimal static SVG renderings (presentation only, not contractual)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .regions import SHADES, GridSpec

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _frame(width, height, body, title=""):
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            'font-family="sans-serif">']
    if title:
        head.append(f'<text x="{width / 2:.1f}" y="16" font-size="13" '
                    f'text-anchor="middle">{title}</text>')
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v) - lo) / span * (b - a)


def line_chart(path: str | Path, series, xlabel: str = "t (s)", title: str = "",
               size=(720, 360)) -> None:
    """``series`` is a list of (label, x, y); NaNs break the line."""
    W, H = size
    x0, x1, y0, y1 = 60, W - 140, H - 40, 30
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    ys = ys[np.isfinite(ys)]
    xmap = _scale(np.nanmin(xs), np.nanmax(xs), x0, x1)
    ylo, yhi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    pad = 0.05 * (yhi - ylo or 1.0)
    ymap = _scale(ylo - pad, yhi + pad, y0, y1)
    body = [f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" '
            'stroke="#444"/>',
            f'<text x="{(x0 + x1) / 2}" y="{H - 8}" font-size="12" text-anchor="middle">'
            f'{xlabel}</text>',
            f'<text x="{x0 - 4}" y="{y1 + 4}" font-size="10" text-anchor="end">{yhi:.3g}</text>',
            f'<text x="{x0 - 4}" y="{y0}" font-size="10" text-anchor="end">{ylo:.3g}</text>']
    for i, (label, x, y) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        px, py = xmap(np.asarray(x, float)), ymap(np.asarray(y, float))
        ok = np.isfinite(py)
        runs, cur = [], []
        for a, b, good in zip(px, py, ok):
            if good:
                cur.append(f"{a:.2f},{b:.2f}")
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for r in runs:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
                        f'points="{" ".join(r)}"/>')
        body.append(f'<text x="{x1 + 10}" y="{y1 + 14 + 16 * i}" font-size="12" '
                    f'fill="{color}">{label}</text>')
    Path(path).write_text(_frame(W, H, body, title))


def _plane(grid: GridSpec, size):
    x = _scale(grid.d12_min, grid.d12_max, 40, 40 + size)
    y = _scale(grid.d13_min, grid.d13_max, 30 + size, 30)
    return x, y


def _cells(arr, colors, grid, size):
    """Run-length rects of a (n13, n12) integer array."""
    n13, n12 = arr.shape
    cw, ch = size / n12, size / n13
    out = []
    for r in range(n13):
        row = arr[r]
        y = 30 + (n13 - 1 - r) * ch
        start = 0
        for c in range(1, n12 + 1):
            if c == n12 or row[c] != row[start]:
                out.append(f'<rect x="{40 + start * cw:.2f}" y="{y:.2f}" '
                           f'width="{(c - start) * cw:.2f}" height="{ch:.2f}" '
                           f'fill="{colors[int(row[start])]}"/>')
                start = c
    return out


def plane_overlay(path: str | Path, grid: GridSpec, background: np.ndarray | None,
                  lines: dict[str, list[np.ndarray]], points: dict[str, list] | None = None,
                  colors=None, title: str = "", size: int = 560) -> None:
    """Polylines and points in the (d12, d13) plane over an optional region raster."""
    xm, ym = _plane(grid, size)
    body = ['<g shape-rendering="crispEdges">']
    if background is not None:
        body += _cells(background, colors or SHADES, grid, size)
    body.append("</g>")
    body.append(f'<rect x="40" y="30" width="{size}" height="{size}" fill="none" stroke="#444"/>')
    for i, (name, polys) in enumerate(lines.items()):
        color = PALETTE[i % len(PALETTE)]
        for p in polys:
            if len(p) < 2:
                continue
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xm(p[:, 0]), ym(p[:, 1])))
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                        f'points="{pts}"/>')
        body.append(f'<text x="{size + 60}" y="{50 + 16 * i}" font-size="12" '
                    f'fill="{color}">{name}</text>')
    for name, pts in (points or {}).items():
        for a, b in pts:
            body.append(f'<circle cx="{float(xm(a)):.2f}" cy="{float(ym(b)):.2f}" r="4" '
                        f'fill="black"><title>{name}</title></circle>')
    body.append(f'<text x="{40 + size / 2}" y="{size + 55}" font-size="12" '
                'text-anchor="middle">delta12 (rad)</text>')
    body.append(f'<text x="12" y="{30 + size / 2}" font-size="12" '
                f'transform="rotate(-90 12 {30 + size / 2})" text-anchor="middle">'
                'delta13 (rad)</text>')
    Path(path).write_text(_frame(size + 200, size + 70, body, title))


def sign_map(path: str | Path, grid: GridSpec, values: np.ndarray,
             zero_lines: list[np.ndarray], hatch: np.ndarray | None = None,
             title: str = "", size: int = 560) -> None:
    """Sign heatmap (blue negative, red positive) with zero contour and hatching."""
    cls = np.where(~np.isfinite(values), 0, np.where(values < 0, 1, 2)).astype(int)
    if hatch is not None:
        cls = cls + 3 * (hatch & np.isfinite(values))
    colors = {0: "#ffffff", 1: "#9ecae1", 2: "#fc9272", 4: "#6baed6", 5: "#ef3b2c"}
    xm, ym = _plane(grid, size)
    body = ['<defs><pattern id="h" width="6" height="6" patternUnits="userSpaceOnUse">'
            '<path d="M0,6 L6,0" stroke="#333" stroke-width="0.6"/></pattern></defs>',
            '<g shape-rendering="crispEdges">']
    body += _cells(cls, colors, grid, size)
    body.append("</g>")
    for p in zero_lines:
        if len(p) < 2:
            continue
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xm(p[:, 0]), ym(p[:, 1])))
        body.append(f'<polyline fill="none" stroke="black" stroke-width="1.5" points="{pts}"/>')
    body.append(f'<rect x="40" y="30" width="{size}" height="{size}" fill="none" stroke="#444"/>')
    legend = (("negative", "#9ecae1"), ("positive", "#fc9272"),
              ("negative, braking", "#6baed6"), ("positive, braking", "#ef3b2c"))
    for i, (label, c) in enumerate(legend):
        body.append(f'<rect x="{size + 55}" y="{40 + 20 * i}" width="12" height="12" fill="{c}"/>')
        body.append(f'<text x="{size + 72}" y="{51 + 20 * i}" font-size="11">{label}</text>')
    Path(path).write_text(_frame(size + 200, size + 70, body, title))
