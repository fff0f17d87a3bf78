"""Control-combination region map over the (d12, d13) plane."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import find_contours

from .algebraic import Saturation, classify_field, table_condition
from .devices import Params
from .network import ReducedNetwork

# Light-to-dark shades: GFM-NC in blues, GFM-CS in oranges, GFL mode sets the tone.
SHADES = {
    0: "#ffffff",
    1: "#c6dbef",
    2: "#6baed6",
    3: "#2171b5",
    4: "#fdd0a2",
    5: "#fd8d3c",
    6: "#d94801",
}


@dataclass(frozen=True)
class GridSpec:
    d12_min: float = -np.pi
    d12_max: float = np.pi
    d13_min: float = -np.pi
    d13_max: float = np.pi
    n12: int = 401
    n13: int = 401

    def __post_init__(self):
        if self.n12 < 3 or self.n13 < 3:
            raise ValueError("grid resolution must be at least 3 in each axis")
        if not (self.d12_max > self.d12_min and self.d13_max > self.d13_min):
            raise ValueError("grid ranges must be increasing")

    @property
    def d12(self) -> np.ndarray:
        return np.linspace(self.d12_min, self.d12_max, self.n12)

    @property
    def d13(self) -> np.ndarray:
        return np.linspace(self.d13_min, self.d13_max, self.n13)

    def mesh(self):
        """(D12, D13) arrays of shape (n13, n12); rows follow d13."""
        return np.meshgrid(self.d12, self.d13)


@dataclass
class RegionMap:
    """Selected combination per cell plus the quantities needed downstream.

    Arrays have shape ``(n13, n12)``; ``n == 0`` marks cells with no
    self-consistent combination.
    """

    grid: GridSpec
    n: np.ndarray
    multiplicity: np.ndarray
    consistent: dict[int, np.ndarray]
    u_fl: np.ndarray
    u_fl_q: np.ndarray
    p_fm: np.ndarray
    i_fm_proxy: np.ndarray
    stage: str = ""
    saturation: Saturation | None = None
    boundaries: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def counts(self) -> dict[int, int]:
        return {k: int(np.sum(self.n == k)) for k in range(7)}

    def recheck(self, params: Params) -> np.ndarray:
        """Table I condition of each cell's own combination, re-evaluated."""
        ok = np.ones(self.n.shape, dtype=bool)
        for k in range(1, 7):
            m = self.n == k
            if np.any(m):
                ok[m] = table_condition(k, self.i_fm_proxy[m], self.u_fl[m], params)
        return ok

    def multiple_cells(self) -> list[tuple[float, float, list[int]]]:
        """Cells where more than one combination is consistent."""
        out = []
        D12, D13 = self.grid.mesh()
        for r, c in zip(*np.nonzero(self.multiplicity > 1)):
            ns = [k for k in range(1, 7) if self.consistent[k][r, c]]
            out.append((float(D12[r, c]), float(D13[r, c]), ns))
        return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HYBRES_THREADS", "1")))
    except ValueError:
        return 1


def _classify_chunk(d12, d13, net, params, sat):
    cf = classify_field(d12, d13, net, params, sat=sat)
    n = cf.choose()
    N = d12.size
    u_fl = np.full(N, np.nan)
    u_q = np.full(N, np.nan)
    p = np.full(N, np.nan)
    proxy = np.full(N, np.nan)
    for k, fld in cf.fields.items():
        m = n == k
        u_fl[m] = fld.u_fl[m]
        u_q[m] = fld.u_fl_q[m]
        p[m] = fld.p_fm[m]
        proxy[m] = cf.proxy[k][m]
    cons = {k: v.copy() for k, v in cf.consistent.items()}
    return n, cf.multiplicity, cons, u_fl, u_q, p, proxy


def region_map(net: ReducedNetwork, params: Params, grid: GridSpec | None = None,
               sat: Saturation | None = None, chunk: int = 8192) -> RegionMap:
    """Classify every grid cell with the lowest-n tie-break.

    Cells are processed in fixed chunks; ``HYBRES_THREADS`` sets how many
    chunks run concurrently. Results do not depend on the thread count.
    """
    grid = grid or GridSpec()
    D12, D13 = grid.mesh()
    a, b = D12.ravel(), D13.ravel()
    spans = [(s, min(s + chunk, a.size)) for s in range(0, a.size, chunk)]
    work = lambda sp: _classify_chunk(a[sp[0]:sp[1]], b[sp[0]:sp[1]], net, params, sat)
    nt = _threads()
    if nt > 1:
        with ThreadPoolExecutor(max_workers=nt) as ex:
            parts = list(ex.map(work, spans))
    else:
        parts = [work(sp) for sp in spans]

    shape = D12.shape
    cat = lambda i: np.concatenate([p[i] for p in parts]).reshape(shape)
    consistent = {k: np.concatenate([p[2][k] for p in parts]).reshape(shape) for k in range(1, 7)}
    rm = RegionMap(grid, cat(0), cat(1), consistent, cat(3), cat(4), cat(5), cat(6),
                   stage=net.stage, saturation=sat)
    rm.boundaries = region_boundaries(rm)
    return rm


def _to_angles(contour: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Convert (row, col) contour coordinates to (d12, d13)."""
    r, c = contour[:, 0], contour[:, 1]
    d12 = grid.d12_min + c * (grid.d12_max - grid.d12_min) / (grid.n12 - 1)
    d13 = grid.d13_min + r * (grid.d13_max - grid.d13_min) / (grid.n13 - 1)
    return np.column_stack([d12, d13])


def region_boundaries(rm: RegionMap) -> dict[int, list[np.ndarray]]:
    """Outline polylines of each combination's region, in angle coordinates."""
    out = {}
    for k in range(1, 7):
        mask = (rm.n == k).astype(float)
        if not mask.any() or mask.all():
            out[k] = []
            continue
        out[k] = [_to_angles(c, rm.grid) for c in find_contours(mask, 0.5)]
    return out


def write_region_csv(path: str | Path, rm: RegionMap) -> None:
    D12, D13 = rm.grid.mesh()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d12", "d13", "n", "multiplicity"])
        for r in range(D12.shape[0]):
            for c in range(D12.shape[1]):
                w.writerow([f"{D12[r, c]:.10f}", f"{D13[r, c]:.10f}",
                            int(rm.n[r, c]), int(rm.multiplicity[r, c])])


def write_boundaries_csv(path: str | Path, rm: RegionMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "polyline", "d12", "d13"])
        for k in sorted(rm.boundaries):
            for j, line in enumerate(rm.boundaries[k]):
                for p in line:
                    w.writerow([k, j, f"{p[0]:.10f}", f"{p[1]:.10f}"])


def write_region_svg(path: str | Path, rm: RegionMap, size: int = 600) -> None:
    """Six-shade rendering; consecutive equal cells in a row share one rect."""
    n13, n12 = rm.n.shape
    cw, ch = size / n12, size / n13
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" '
             f'height="{size + 40}" shape-rendering="crispEdges">',
             '<g transform="translate(20,20)">']
    for r in range(n13):
        row = rm.n[r]
        y = (n13 - 1 - r) * ch  # d13 grows upward
        start = 0
        for c in range(1, n12 + 1):
            if c == n12 or row[c] != row[start]:
                parts.append(f'<rect x="{start * cw:.3f}" y="{y:.3f}" '
                             f'width="{(c - start) * cw:.3f}" height="{ch:.3f}" '
                             f'fill="{SHADES[int(row[start])]}"/>')
                start = c
    parts.append("</g>")
    for i, k in enumerate(range(1, 7)):
        y = 30 + 22 * i
        parts.append(f'<rect x="{size + 40}" y="{y}" width="14" height="14" fill="{SHADES[k]}"/>')
        parts.append(f'<text x="{size + 60}" y="{y + 12}" font-size="12">n={k}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
