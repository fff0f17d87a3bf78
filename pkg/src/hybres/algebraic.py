"""Quasi-static network solution under each control combination.

For a given pair of virtual angle differences (d12, d13) the electrical
quantities follow from the partition matrix of the active GFM mode and the
control laws of both converters.  With the GFM in normal control the
unknowns are (U_FM, I_FL, phi_FL); under current saturation the GFM is a
fixed current source and only (I_FL, phi_FL) remain.

The batched solvers are vectorised over arrays of angle pairs. A plain
Python single-point path (``solve_point``) mirrors them for the integrator,
where per-call array overhead would dominate.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .devices import (
    COMBINATIONS,
    HALF_PI,
    GfmMode,
    GflMode,
    Params,
    combination_of,
    gfl_law,
    gfl_law_at,
    gfl_mode_of,
)
from .errors import (
    BoundaryDegeneracyError,
    NonphysicalRootError,
    NoRealSolutionError,
    NoSolutionError,
)
from .network import ReducedNetwork

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 12


@dataclass(frozen=True)
class Saturation:
    """Frozen GFM current while saturated: magnitude and angle in the GFM frame."""

    current: float
    angle: float


# --------------------------------------------------------------------------
# droop quadratic


def _polar(M, i, j):
    z = M[i - 1, j - 1]
    return abs(z), np.angle(z)


def droop_coefficients(i_fl, phi_fl, d12, d13, net: ReducedNetwork, params: Params):
    """Coefficients (a, b) of U^2 + a U + b = 0 for the GFM voltage in NC mode."""
    g = params.gfm
    M = net.m_nc
    m21, a21 = _polar(M, 2, 1)
    m22, a22 = _polar(M, 2, 2)
    m23, a23 = _polar(M, 2, 3)
    den = m22 * math.sin(-a22)
    psi = d12 - d13 - a23 - phi_fl
    a = (m21 * net.u_sys * np.sin(d12 - a21) + 1.0 / g.k_q + m23 * i_fl * np.sin(psi)) / den
    b = -(g.k_q * g.q_ref + g.u0) / (g.k_q * den)
    return a, b


def quadratic_root(a: float, b: float) -> float:
    """Positive branch (-a + sqrt(a^2 - 4b)) / 2 with physical checks."""
    disc = a * a - 4.0 * b
    if disc < 0:
        raise NoRealSolutionError(f"negative discriminant {disc:.3e}")
    root = 0.5 * (-a + math.sqrt(disc))
    if root <= 0:
        raise NonphysicalRootError(f"non-positive GFM voltage root {root:.3e}")
    return root


def solve_u_fm_quadratic(i_fl, phi_fl, d12, d13, net: ReducedNetwork, params: Params) -> float:
    """GFM voltage magnitude consistent with the Q-V droop in NC mode."""
    if params.gfm.k_q == 0:
        return params.gfm.u0
    a, b = droop_coefficients(i_fl, phi_fl, d12, d13, net, params)
    return quadratic_root(float(a), float(b))


# --------------------------------------------------------------------------
# residual kernels


def _kernel(gfm_mode, gfl_mode, x, d12, d13, net, params, sat_i, sat_phi):
    """Residual, Jacobians and derived phasors for a batch of points.

    ``x`` has shape (N, 3) for NC and (N, 2) for CS. Returns a dict with
    ``r`` (N, k), ``jx`` (N, k, k), ``jd`` (N, k, 2) and phasors.
    """
    us = net.u_sys
    g = params.gfm
    n = x.shape[0]
    if gfm_mode is GfmMode.NC:
        M = net.m_nc
        U, I, phi = x[:, 0], x[:, 1], x[:, 2]
        e12 = np.exp(1j * d12)
        e3 = np.exp(1j * (d13 + phi))
        U2 = U * e12
        I3 = I * e3
        U3 = M[2, 0] * us + M[2, 1] * U2 + M[2, 2] * I3
        I2 = M[1, 0] * us + M[1, 1] * U2 + M[1, 2] * I3
        dU3 = {
            "U": M[2, 1] * e12,
            "I": M[2, 2] * e3,
            "phi": 1j * M[2, 2] * I3,
            "d12": 1j * M[2, 1] * U2,
            "d13": 1j * M[2, 2] * I3,
        }
        if g.k_q == 0:
            fU = np.full(n, g.u0)
            dfU = {k: np.zeros(n) for k in ("I", "phi", "d12", "d13")}
        else:
            m21, a21 = _polar(M, 2, 1)
            m22, a22 = _polar(M, 2, 2)
            m23, a23 = _polar(M, 2, 3)
            den = m22 * math.sin(-a22)
            psi = d12 - d13 - a23 - phi
            a = (m21 * us * np.sin(d12 - a21) + 1.0 / g.k_q + m23 * I * np.sin(psi)) / den
            b = -(g.k_q * g.q_ref + g.u0) / (g.k_q * den)
            disc = a * a - 4.0 * b
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            fU = 0.5 * (-a + sq)
            fU = np.where(fU > 0, fU, np.nan)
            dfda = 0.5 * (-1.0 + a / sq)
            dfU = {
                "I": dfda * m23 * np.sin(psi) / den,
                "phi": -dfda * m23 * I * np.cos(psi) / den,
                "d12": dfda * (m21 * us * np.cos(d12 - a21) + m23 * I * np.cos(psi)) / den,
                "d13": -dfda * m23 * I * np.cos(psi) / den,
            }
        unknowns = ("U", "I", "phi")
    else:
        M = net.m_cs
        I, phi = x[:, 0], x[:, 1]
        I2 = sat_i * np.exp(1j * (d12 + sat_phi))
        e3 = np.exp(1j * (d13 + phi))
        I3 = I * e3
        U2 = M[1, 0] * us + M[1, 1] * I2 + M[1, 2] * I3
        U3 = M[2, 0] * us + M[2, 1] * I2 + M[2, 2] * I3
        dU3 = {
            "I": M[2, 2] * e3,
            "phi": 1j * M[2, 2] * I3,
            "d12": 1j * M[2, 1] * I2,
            "d13": 1j * M[2, 2] * I3,
        }
        unknowns = ("I", "phi")

    v = np.abs(U3)
    with np.errstate(invalid="ignore", divide="ignore"):
        dv = {k: np.real(np.conj(U3) * d) / v for k, d in dU3.items()}
    fI, fphi, sI, sphi = gfl_law(v, gfl_mode, params.gfl)

    k = len(unknowns)
    r = np.empty((n, k))
    jx = np.zeros((n, k, k))
    jd = np.zeros((n, k, 2))
    row = 0
    if gfm_mode is GfmMode.NC:
        r[:, 0] = U - fU
        jx[:, 0, 0] = 1.0
        jx[:, 0, 1] = -dfU["I"]
        jx[:, 0, 2] = -dfU["phi"]
        jd[:, 0, 0] = -dfU["d12"]
        jd[:, 0, 1] = -dfU["d13"]
        row = 1
    r[:, row] = I - fI
    r[:, row + 1] = phi - fphi
    for c, name in enumerate(unknowns):
        jx[:, row, c] = -sI * dv[name]
        jx[:, row + 1, c] = -sphi * dv[name]
    jx[:, row, row] += 1.0
    jx[:, row + 1, row + 1] += 1.0
    for c, name in enumerate(("d12", "d13")):
        jd[:, row, c] = -sI * dv[name]
        jd[:, row + 1, c] = -sphi * dv[name]

    return {"r": r, "jx": jx, "jd": jd, "U2": U2, "I2": I2, "U3": U3, "I3": I3}


def _solve_small(A, b):
    """Batched solve of small systems by Cramer's rule; singular rows give NaN."""
    det = np.linalg.det(A)
    out = np.empty_like(b)
    for c in range(A.shape[-1]):
        Ac = A.copy()
        Ac[:, :, c] = b
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, c] = np.linalg.det(Ac) / det
    bad = np.abs(det) < 1e-13
    out[bad] = np.nan
    return out


def _maxabs(r):
    m = np.max(np.abs(r), axis=1)
    return np.where(np.isfinite(m), m, np.inf)


def _newton(gfm_mode, gfl_mode, x0, d12, d13, net, params, sat_i, sat_phi):
    """Damped Newton over a batch. Returns (x, converged, iterations)."""
    x = x0.copy()
    iters = np.zeros(x.shape[0], dtype=int)
    out = _kernel(gfm_mode, gfl_mode, x, d12, d13, net, params, sat_i, sat_phi)
    norm = _maxabs(out["r"])
    jx = out["jx"]
    r = out["r"]
    conv = norm < NEWTON_TOL
    alive = np.isfinite(norm)
    for _ in range(NEWTON_MAX_ITER):
        todo = np.flatnonzero(alive & ~conv)
        if todo.size == 0:
            break
        step = _solve_small(jx[todo], r[todo])
        ok = np.all(np.isfinite(step), axis=1)
        alive[todo[~ok]] = False
        todo, step = todo[ok], step[ok]
        lam = np.ones(todo.size)
        pending = np.ones(todo.size, dtype=bool)
        for _h in range(MAX_HALVINGS):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            sel = todo[idx]
            xt = x[sel] - lam[idx, None] * step[idx]
            trial = _kernel(gfm_mode, gfl_mode, xt, _take(d12, sel), _take(d13, sel),
                            net, params, _take(sat_i, sel), _take(sat_phi, sel))
            nt = _maxabs(trial["r"])
            better = nt < norm[sel]
            acc = sel[better]
            x[acc] = xt[better]
            norm[acc] = nt[better]
            r[acc] = trial["r"][better]
            jx[acc] = trial["jx"][better]
            iters[acc] += 1
            pending[idx[better]] = False
            lam[idx] *= 0.5
        alive[todo[pending]] = False
        conv = norm < NEWTON_TOL
    return x, conv, iters


def _take(a, sel):
    if np.ndim(a) == 0:
        return a
    return a[sel]


# --------------------------------------------------------------------------
# single-point path (used by the integrator; mirrors _kernel and _newton)


@dataclass
class _Coeffs:
    """Network constants of one stage, unpacked once for scalar evaluation."""

    us: float
    nc: tuple
    cs: tuple
    droop: tuple | None


_COEFF_CACHE: dict[int, tuple[ReducedNetwork, Params, _Coeffs]] = {}


def _coeffs(net: ReducedNetwork, params: Params) -> _Coeffs:
    key = id(net)
    hit = _COEFF_CACHE.get(key)
    if hit is not None and hit[0] is net and hit[1] is params:
        return hit[2]
    g = params.gfm
    Mn, Mc = net.m_nc, net.m_cs
    nc = tuple(complex(Mn[i, j]) for i in (1, 2) for j in range(3))
    cs = tuple(complex(Mc[i, j]) for i in (1, 2) for j in range(3))
    droop = None
    if g.k_q != 0:
        m21, a21 = _polar(Mn, 2, 1)
        m22, a22 = _polar(Mn, 2, 2)
        m23, a23 = _polar(Mn, 2, 3)
        den = m22 * math.sin(-a22)
        droop = (float(m21), float(a21), float(m23), float(a23), float(den),
                 -(g.k_q * g.q_ref + g.u0) / (g.k_q * den), 1.0 / g.k_q)
    c = _Coeffs(float(net.u_sys), nc, cs, droop)
    if len(_COEFF_CACHE) > 64:
        _COEFF_CACHE.clear()
    _COEFF_CACHE[key] = (net, params, c)
    return c


def _kernel1(gfm_mode, gfl_mode, x, d12, d13, c: _Coeffs, params, sat_i, sat_phi):
    """Scalar residual, Jacobians and phasors; ``None`` where undefined."""
    us = c.us
    if gfm_mode is GfmMode.NC:
        M21, M22, M23, M31, M32, M33 = c.nc
        U, I, phi = x
        e12 = cmath.exp(1j * d12)
        e3 = cmath.exp(1j * (d13 + phi))
        U2 = U * e12
        I3 = I * e3
        U3 = M31 * us + M32 * U2 + M33 * I3
        I2 = M21 * us + M22 * U2 + M23 * I3
        dU3 = (M32 * e12, M33 * e3, 1j * M33 * I3, 1j * M32 * U2, 1j * M33 * I3)
        if c.droop is None:
            fU, dfU = params.gfm.u0, (0.0, 0.0, 0.0, 0.0)
        else:
            m21, a21, m23, a23, den, b, inv_kq = c.droop
            psi = d12 - d13 - a23 - phi
            spsi, cpsi = math.sin(psi), math.cos(psi)
            a = (m21 * us * math.sin(d12 - a21) + inv_kq + m23 * I * spsi) / den
            disc = a * a - 4.0 * b
            if disc < 0:
                return None
            sq = math.sqrt(disc)
            fU = 0.5 * (-a + sq)
            if not fU > 0:
                return None
            dfda = 0.5 * (-1.0 + a / sq)
            dfU = (dfda * m23 * spsi / den,
                   -dfda * m23 * I * cpsi / den,
                   dfda * (m21 * us * math.cos(d12 - a21) + m23 * I * cpsi) / den,
                   -dfda * m23 * I * cpsi / den)
    else:
        M21, M22, M23, M31, M32, M33 = c.cs
        I, phi = x
        I2 = sat_i * cmath.exp(1j * (d12 + sat_phi))
        e3 = cmath.exp(1j * (d13 + phi))
        I3 = I * e3
        U2 = M21 * us + M22 * I2 + M23 * I3
        U3 = M31 * us + M32 * I2 + M33 * I3
        dU3 = (M33 * e3, 1j * M33 * I3, 1j * M32 * I2, 1j * M33 * I3)

    v = abs(U3)
    if not v > 0 or not math.isfinite(v):
        return None
    cu = U3.conjugate()
    dv = [(cu * d).real / v for d in dU3]
    fI, fphi, sI, sphi = gfl_law_at(v, gfl_mode, params.gfl)
    if gfm_mode is GfmMode.NC:
        r = [U - fU, I - fI, phi - fphi]
        jx = [[1.0, -dfU[0], -dfU[1]],
              [-sI * dv[0], 1.0 - sI * dv[1], -sI * dv[2]],
              [-sphi * dv[0], -sphi * dv[1], 1.0 - sphi * dv[2]]]
        jd = [[-dfU[2], -dfU[3]],
              [-sI * dv[3], -sI * dv[4]],
              [-sphi * dv[3], -sphi * dv[4]]]
    else:
        r = [I - fI, phi - fphi]
        jx = [[1.0 - sI * dv[0], -sI * dv[1]],
              [-sphi * dv[0], 1.0 - sphi * dv[1]]]
        jd = [[-sI * dv[2], -sI * dv[3]],
              [-sphi * dv[2], -sphi * dv[3]]]
    return r, jx, jd, U2, I2, U3, I3


def _lin(A, b):
    """Gaussian elimination with partial pivoting; ``None`` when singular."""
    n = len(b)
    A = [row[:] + [b[i]] for i, row in enumerate(A)]
    for c in range(n):
        p = max(range(c, n), key=lambda i: abs(A[i][c]))
        if abs(A[p][c]) < 1e-13:
            return None
        A[c], A[p] = A[p], A[c]
        for i in range(c + 1, n):
            f = A[i][c] / A[c][c]
            for j in range(c, n + 1):
                A[i][j] -= f * A[c][j]
    out = [0.0] * n
    for i in range(n - 1, -1, -1):
        s = A[i][n] - sum(A[i][j] * out[j] for j in range(i + 1, n))
        out[i] = s / A[i][i]
    return out


@dataclass
class PointSolution:
    """Solved combination at one angle pair, with its Jacobians."""

    gfm_mode: GfmMode
    gfl_mode: GflMode
    d12: float
    d13: float
    x: list
    residual: float
    iterations: int
    jx: list
    jd: list
    U2: complex
    I2: complex
    U3: complex
    I3: complex
    sat_i: float = 0.0
    sat_phi: float = 0.0

    @property
    def n(self) -> int:
        return combination_of(self.gfm_mode, self.gfl_mode)

    @property
    def u_fl(self) -> float:
        return abs(self.U3)

    @property
    def u_fl_q(self) -> float:
        return (self.U3 * cmath.exp(-1j * self.d13)).imag

    @property
    def i_fm(self) -> float:
        return abs(self.I2)

    @property
    def p_fm(self) -> float:
        return (self.U2 * self.I2.conjugate()).real

    @property
    def i_fl(self) -> float:
        return self.x[-2]

    @property
    def phi_fl(self) -> float:
        return self.x[-1]

    def partials(self) -> list[list[float]] | None:
        """dx/d(d12, d13) as ``[[dx_k/dd12, dx_k/dd13], ...]``; None if singular."""
        cols = []
        for c in range(2):
            s = _lin(self.jx, [-row[c] for row in self.jd])
            if s is None:
                return None
            cols.append(s)
        return [[cols[0][k], cols[1][k]] for k in range(len(self.x))]

    def state(self, proxy: float | None = None) -> AlgebraicState:
        udq = self.U3 * cmath.exp(-1j * self.d13)
        s = self.U2 * self.I2.conjugate()
        i_rel = self.I2 * cmath.exp(-1j * self.d12)
        sat = Saturation(self.sat_i, self.sat_phi) if self.gfm_mode is GfmMode.CS else None
        return AlgebraicState(
            d12=self.d12, d13=self.d13, n=self.n,
            u_fm=abs(self.U2), u_fm_angle=cmath.phase(self.U2),
            u_fl=abs(self.U3), u_fl_q=udq.imag, u_fl_d=udq.real,
            i_fl=self.x[-2], phi_fl=self.x[-1],
            i_fm=abs(self.I2), i_fm_angle=cmath.phase(i_rel),
            i_fm_proxy=abs(self.I2) if proxy is None else float(proxy),
            p_fm=s.real, q_fm=s.imag, saturation=sat, x=tuple(self.x),
            iterations=self.iterations, residual=self.residual,
        )


def _newton1(gfm_mode, gfl_mode, x0, d12, d13, c, params, sat_i, sat_phi):
    x = list(x0)
    out = _kernel1(gfm_mode, gfl_mode, x, d12, d13, c, params, sat_i, sat_phi)
    if out is None:
        return None
    norm = max(abs(v) for v in out[0])
    it = 0
    while norm >= NEWTON_TOL:
        if it >= NEWTON_MAX_ITER:
            return None
        step = _lin(out[1], out[0])
        if step is None:
            return None
        lam = 1.0
        for _h in range(MAX_HALVINGS):
            xt = [a - lam * s for a, s in zip(x, step)]
            trial = _kernel1(gfm_mode, gfl_mode, xt, d12, d13, c, params, sat_i, sat_phi)
            if trial is not None:
                nt = max(abs(v) for v in trial[0])
                if nt < norm:
                    x, out, norm = xt, trial, nt
                    break
            lam *= 0.5
        else:
            return None
        it += 1
    return x, out, norm, it


def solve_point(d12: float, d13: float, gfm_mode, gfl_mode, net: ReducedNetwork,
                params: Params, sat: Saturation | None = None, guess=None,
                fallback: bool = True) -> PointSolution | None:
    """Single-point solve of one combination.

    Newton from ``guess`` runs in plain Python; when it fails (or no guess is
    given) the batched multistart solver is used if ``fallback``. Returns
    None when no start converges.
    """
    gfm_mode, gfl_mode = GfmMode(gfm_mode), GflMode(gfl_mode)
    d12, d13 = float(d12), float(d13)
    c = _coeffs(net, params)
    if gfm_mode is GfmMode.CS:
        sat = sat if sat is not None else default_saturation(params)
        sat_i, sat_phi = float(sat.current), float(sat.angle)
    else:
        sat_i = sat_phi = 0.0
    res = None
    if guess is not None:
        res = _newton1(gfm_mode, gfl_mode, [float(v) for v in guess], d12, d13, c, params,
                       sat_i, sat_phi)
    if res is None:
        if not fallback:
            return None
        fld = solve_mode_field(d12, d13, gfm_mode, gfl_mode, net, params,
                               sat=Saturation(sat_i, sat_phi), guess=guess)
        if not fld.converged[0]:
            return None
        res = _newton1(gfm_mode, gfl_mode, [float(v) for v in fld.x[0]], d12, d13, c, params,
                       sat_i, sat_phi)
        if res is None:
            return None
    x, (r, jx, jd, U2, I2, U3, I3), norm, it = res
    return PointSolution(gfm_mode, gfl_mode, d12, d13, x, norm, it, jx, jd,
                         U2, I2, U3, I3, sat_i, sat_phi)


# --------------------------------------------------------------------------
# batched mode solve


@dataclass
class ModeField:
    """Solutions of one control combination over a batch of angle pairs."""

    gfm_mode: GfmMode
    gfl_mode: GflMode | None
    d12: np.ndarray
    d13: np.ndarray
    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    U2: np.ndarray
    I2: np.ndarray
    U3: np.ndarray
    I3: np.ndarray
    sat_i: np.ndarray | float = 0.0
    sat_phi: np.ndarray | float = 0.0

    @property
    def n(self) -> int:
        if self.gfl_mode is None:
            raise ValueError("combined-law field has no single combination")
        return combination_of(self.gfm_mode, self.gfl_mode)

    @property
    def u_fl(self):
        return np.abs(self.U3)

    @property
    def u_fl_dq(self):
        return self.U3 * np.exp(-1j * self.d13)

    @property
    def u_fl_q(self):
        return self.u_fl_dq.imag

    @property
    def i_fm(self):
        return np.abs(self.I2)

    @property
    def s_fm(self):
        return self.U2 * np.conj(self.I2)

    @property
    def p_fm(self):
        return self.s_fm.real

    @property
    def i_fl(self):
        return self.x[:, -2]

    @property
    def phi_fl(self):
        return self.x[:, -1]

    def gfl_consistent(self, gfl) -> np.ndarray:
        v = self.u_fl
        if self.gfl_mode is None:
            ok = np.isfinite(v)
        elif self.gfl_mode is GflMode.LVRT:
            ok = v < gfl.u_lv
        elif self.gfl_mode is GflMode.HVRT:
            ok = v > gfl.u_hv
        else:
            ok = (v >= gfl.u_lv) & (v <= gfl.u_hv)
        return ok & self.converged


def _starts(gfm_mode, gfl_mode, params, guess=None):
    g, f = params.gfm, params.gfl
    rows = [
        (g.u0, f.i0, f.phi0),
        (0.5, f.i_max, -HALF_PI),
        (1.2, f.i_max, HALF_PI),
        (0.2, f.i0, f.phi0),
    ]
    if gfl_mode is GflMode.NC:
        rows = rows[:1] + [(0.2, f.i0, f.phi0)]
    out = [np.asarray(r[1:] if gfm_mode is GfmMode.CS else r, dtype=float) for r in rows]
    return out


def solve_mode_field(d12, d13, gfm_mode, gfl_mode, net: ReducedNetwork, params: Params,
                     sat: Saturation | None = None, guess=None, accept=None) -> ModeField:
    """Solve one combination at every (d12, d13) pair.

    Multistart order: ``guess`` (array (N, k) or (k,)), flat start, clamp
    corners. ``accept(field, mask)`` can reject converged solutions so the
    remaining starts are tried; the first converged solution is kept as a
    fallback.
    """
    gfm_mode = GfmMode(gfm_mode)
    gfl_mode = None if gfl_mode is None else GflMode(gfl_mode)
    d12, d13 = np.broadcast_arrays(np.atleast_1d(np.asarray(d12, float)),
                                   np.atleast_1d(np.asarray(d13, float)))
    d12, d13 = d12.ravel().copy(), d13.ravel().copy()
    N = d12.size
    if gfm_mode is GfmMode.CS:
        if sat is None:
            sat = default_saturation(params)
        sat_i = np.broadcast_to(np.asarray(sat.current, float), (N,)).copy() \
            if np.ndim(sat.current) else float(sat.current)
        sat_phi = np.broadcast_to(np.asarray(sat.angle, float), (N,)).copy() \
            if np.ndim(sat.angle) else float(sat.angle)
    else:
        sat_i, sat_phi = 0.0, 0.0
    k = 3 if gfm_mode is GfmMode.NC else 2

    starts = _starts(gfm_mode, gfl_mode, params)
    if guess is not None:
        guess = np.asarray(guess, float)
        starts = [np.broadcast_to(guess, (N, k)) if guess.ndim == 1 else guess] + starts

    x = np.full((N, k), np.nan)
    conv = np.zeros(N, dtype=bool)
    accepted = np.zeros(N, dtype=bool)
    iters = np.zeros(N, dtype=int)
    for s in starts:
        todo = np.flatnonzero(~accepted)
        if todo.size == 0:
            break
        x0 = np.array(np.broadcast_to(s, (N, k))[todo])
        good = np.all(np.isfinite(x0), axis=1)
        todo, x0 = todo[good], x0[good]
        if todo.size == 0:
            continue
        xs, cs, it = _newton(gfm_mode, gfl_mode, x0, d12[todo], d13[todo], net, params,
                             _take(sat_i, todo), _take(sat_phi, todo))
        iters[todo] += it
        first = cs & ~conv[todo]
        x[todo[first]] = xs[first]
        conv[todo[first]] = True
        if accept is None:
            accepted[todo[cs]] = True
            x[todo[cs]] = xs[cs]
            continue
        trial = _finish(gfm_mode, gfl_mode, xs, d12[todo], d13[todo], cs, it, net, params,
                        _take(sat_i, todo), _take(sat_phi, todo))
        ok = cs & accept(trial)
        x[todo[ok]] = xs[ok]
        accepted[todo[ok]] = True

    return _finish(gfm_mode, gfl_mode, x, d12, d13, conv, iters, net, params, sat_i, sat_phi)


def _finish(gfm_mode, gfl_mode, x, d12, d13, conv, iters, net, params, sat_i, sat_phi):
    xx = np.where(np.isfinite(x), x, 0.0)
    out = _kernel(gfm_mode, gfl_mode, xx, d12, d13, net, params, sat_i, sat_phi)
    res = _maxabs(out["r"])
    nan = ~conv
    for key in ("U2", "I2", "U3", "I3"):
        out[key][nan] = np.nan
    return ModeField(gfm_mode, gfl_mode, d12, d13, x, conv, iters, res,
                     out["U2"], out["I2"], out["U3"], out["I3"], sat_i, sat_phi)


def default_saturation(params: Params) -> Saturation:
    """Static saturation reference when no entry current is available."""
    g = params.gfm
    return Saturation(g.i_sa, g.phi_sa)


# --------------------------------------------------------------------------
# scalar state


@dataclass
class AlgebraicState:
    d12: float
    d13: float
    n: int
    u_fm: float
    u_fm_angle: float
    u_fl: float
    u_fl_q: float
    u_fl_d: float
    i_fl: float
    phi_fl: float
    i_fm: float
    i_fm_angle: float
    i_fm_proxy: float
    p_fm: float
    q_fm: float
    saturation: Saturation | None = None
    x: tuple = field(default=(), repr=False)
    iterations: int = 0
    residual: float = 0.0

    @property
    def gfm_mode(self) -> GfmMode:
        return COMBINATIONS[self.n][0]

    @property
    def gfl_mode(self) -> GflMode:
        return COMBINATIONS[self.n][1]


def state_from_field(fld: ModeField, k: int = 0, proxy: float | None = None,
                     n: int | None = None) -> AlgebraicState:
    U2, I2, U3 = fld.U2[k], fld.I2[k], fld.U3[k]
    d12, d13 = float(fld.d12[k]), float(fld.d13[k])
    udq = U3 * np.exp(-1j * d13)
    s = U2 * np.conj(I2)
    i_rel = I2 * np.exp(-1j * d12)
    sat = None
    if fld.gfm_mode is GfmMode.CS:
        sat = Saturation(float(np.ravel(fld.sat_i)[k if np.ndim(fld.sat_i) else 0]),
                         float(np.ravel(fld.sat_phi)[k if np.ndim(fld.sat_phi) else 0]))
    if proxy is None:
        proxy = float(abs(I2))
    return AlgebraicState(
        d12=d12, d13=d13, n=fld.n if n is None else n,
        u_fm=float(abs(U2)), u_fm_angle=float(np.angle(U2)),
        u_fl=float(abs(U3)), u_fl_q=float(udq.imag), u_fl_d=float(udq.real),
        i_fl=float(fld.x[k, -2]), phi_fl=float(fld.x[k, -1]),
        i_fm=float(abs(I2)), i_fm_angle=float(np.angle(i_rel)),
        i_fm_proxy=float(proxy), p_fm=float(s.real), q_fm=float(s.imag),
        saturation=sat, x=tuple(float(v) for v in fld.x[k]),
        iterations=int(fld.iterations[k]), residual=float(fld.residual[k]),
    )


def shadow_nc(d12, d13, net: ReducedNetwork, params: Params, guess=None):
    """NC solution under the combined (interval-selected) GFL law.

    Returns the batch field and the saturation indicator: the terminal
    current magnitude, or +inf where no NC solution exists.
    """
    fld = solve_mode_field(d12, d13, GfmMode.NC, None, net, params, guess=guess)
    proxy = np.where(fld.converged, np.abs(fld.I2), np.inf)
    return fld, proxy


def solve_mode_state(d12: float, d13: float, gfm_mode, gfl_mode, net: ReducedNetwork,
                     params: Params, sat: Saturation | None = None, guess=None,
                     with_shadow: bool = True) -> AlgebraicState:
    """Solve one combination at a single point.

    Raises :class:`NoSolutionError` when no start converges.  For CS modes
    ``i_fm_proxy`` is the current of the shadow NC solution (``inf`` when no
    NC solution exists) unless ``with_shadow`` is False.
    """
    gfm_mode = GfmMode(gfm_mode)
    fld = solve_mode_field(d12, d13, gfm_mode, gfl_mode, net, params, sat=sat, guess=guess)
    if not fld.converged[0]:
        raise NoSolutionError(
            f"no solution for {gfm_mode.value}+{GflMode(gfl_mode).value} at "
            f"({d12:.6f}, {d13:.6f})")
    proxy = None
    if gfm_mode is GfmMode.CS:
        proxy = float(shadow_nc(d12, d13, net, params)[1][0]) if with_shadow else float("nan")
    return state_from_field(fld, 0, proxy)


# --------------------------------------------------------------------------
# classification


def table_condition(n: int, i_fm_proxy, u_fl, params: Params):
    """Table I membership test of combination ``n`` (vectorised)."""
    gfm, gfl = COMBINATIONS[n]
    i_fm_proxy = np.asarray(i_fm_proxy, float)
    u_fl = np.asarray(u_fl, float)
    if gfm is GfmMode.NC:
        ok = (i_fm_proxy >= 0) & (i_fm_proxy <= params.gfm.i_max)
    else:
        ok = i_fm_proxy > params.gfm.i_max
    if gfl is GflMode.LVRT:
        ok &= u_fl < params.gfl.u_lv
    elif gfl is GflMode.HVRT:
        ok &= u_fl > params.gfl.u_hv
    else:
        ok &= (u_fl >= params.gfl.u_lv) & (u_fl <= params.gfl.u_hv)
    return ok


@dataclass
class CombinationField:
    """Per-combination solutions and Table I consistency over a batch."""

    fields: dict[int, ModeField]
    proxy: dict[int, np.ndarray]
    consistent: dict[int, np.ndarray]

    def choose(self, previous=None) -> np.ndarray:
        """Selected combination per point (0 where none is consistent)."""
        N = next(iter(self.consistent.values())).size
        out = np.zeros(N, dtype=int)
        for n in sorted(self.consistent, reverse=True):
            out[self.consistent[n]] = n
        if previous is not None:
            prev = np.broadcast_to(np.asarray(previous), (N,))
            for n in self.consistent:
                keep = (prev == n) & self.consistent[n]
                out[keep] = n
        return out

    @property
    def multiplicity(self) -> np.ndarray:
        return sum(c.astype(int) for c in self.consistent.values())


def classify_field(d12, d13, net: ReducedNetwork, params: Params,
                   sat: Saturation | None = None, guesses=None) -> CombinationField:
    """Solve all six combinations and test each against its Table I row."""
    fields, proxy, consistent = {}, {}, {}
    gfl = params.gfl
    guesses = guesses or {}
    for n, (gm, fm) in COMBINATIONS.items():
        fld = solve_mode_field(d12, d13, gm, fm, net, params, sat=sat, guess=guesses.get(n),
                               accept=lambda f: f.gfl_consistent(gfl))
        fields[n] = fld
    # NC proxy is the terminal current; the CS proxy is the smallest current
    # among GFL-consistent NC solutions (inf when none exists).
    shadow = np.full(fields[1].d12.size, np.inf)
    for n in (1, 2, 3):
        i = np.where(fields[n].gfl_consistent(gfl), fields[n].i_fm, np.inf)
        shadow = np.minimum(shadow, i)
        proxy[n] = np.where(fields[n].converged, fields[n].i_fm, np.nan)
    for n in (4, 5, 6):
        proxy[n] = shadow
    for n, fld in fields.items():
        consistent[n] = fld.converged & table_condition(n, np.nan_to_num(proxy[n], nan=-1.0),
                                                        fld.u_fl, params)
    return CombinationField(fields, proxy, consistent)


@dataclass
class Classification:
    n: int
    state: AlgebraicState
    candidates: list[int]
    reports: list[dict]

    def __iter__(self):
        yield self.n
        yield self.state


def classify_combination(d12: float, d13: float, net: ReducedNetwork, params: Params,
                         previous: int | None = None, sat: Saturation | None = None,
                         guesses=None) -> Classification:
    """Self-consistent combination at one point.

    Prefers ``previous`` when it is consistent, otherwise the lowest n.
    Raises :class:`NoSolutionError` carrying all six reports when no
    combination is consistent.
    """
    cf = classify_field(d12, d13, net, params, sat=sat, guesses=guesses)
    reports = []
    for n, fld in cf.fields.items():
        reports.append({
            "n": n,
            "converged": bool(fld.converged[0]),
            "residual": float(fld.residual[0]),
            "u_fl": float(fld.u_fl[0]),
            "i_fm_proxy": float(cf.proxy[n][0]),
            "consistent": bool(cf.consistent[n][0]),
        })
    candidates = [r["n"] for r in reports if r["consistent"]]
    if not candidates:
        raise NoSolutionError(f"no self-consistent combination at ({d12:.6f}, {d13:.6f})",
                              reports)
    n = previous if previous in candidates else candidates[0]
    state = state_from_field(cf.fields[n], 0, float(cf.proxy[n][0]))
    return Classification(n, state, candidates, reports)


# --------------------------------------------------------------------------
# implicit partial derivatives


@dataclass(frozen=True)
class Partials:
    du_fm_d12: float
    du_fm_d13: float
    di_fl_d12: float
    di_fl_d13: float
    dphi_fl_d12: float
    dphi_fl_d13: float


def partials_field(fld: ModeField, net: ReducedNetwork, params: Params):
    """dx/d(d12, d13) by the implicit-function theorem, shape (N, k, 2)."""
    xx = np.where(np.isfinite(fld.x), fld.x, 0.0)
    out = _kernel(fld.gfm_mode, fld.gfl_mode, xx, fld.d12, fld.d13, net, params,
                  fld.sat_i, fld.sat_phi)
    k = xx.shape[1]
    dx = np.empty((xx.shape[0], k, 2))
    for c in range(2):
        dx[:, :, c] = -_solve_small(out["jx"], out["jd"][:, :, c])
    dx[~fld.converged] = np.nan
    return dx


def implicit_partials(state: AlgebraicState, net: ReducedNetwork, params: Params) -> Partials:
    """Sensitivities of the unknowns to the two angle differences.

    In CS modes U_FM is not an unknown and its partials are reported as 0.
    """
    gm, fm = COMBINATIONS[state.n]
    sat = state.saturation
    fld = solve_mode_field(state.d12, state.d13, gm, fm, net, params, sat=sat,
                           guess=np.asarray(state.x))
    dx = partials_field(fld, net, params)[0]
    if not np.all(np.isfinite(dx)):
        raise BoundaryDegeneracyError(
            f"singular residual Jacobian at ({state.d12:.6f}, {state.d13:.6f})")
    if gm is GfmMode.NC:
        return Partials(*dx[0], *dx[1], *dx[2])
    return Partials(0.0, 0.0, *dx[0], *dx[1])


def gfl_mode_for(u_fl: float, params: Params) -> GflMode:
    return gfl_mode_of(u_fl, params.gfl)
