"""Potential forces, equilibrium sets, damping fields, energies and verdicts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import fsolve
from scipy.spatial import cKDTree
from shapely.geometry import LineString, MultiPoint, Point
from skimage.measure import find_contours

from .algebraic import (
    AlgebraicState,
    Partials,
    Saturation,
    classify_combination,
    classify_field,
    default_saturation,
    shadow_nc,
    solve_mode_field,
    state_from_field,
)
from .damping import damping_field, damping_terms
from .devices import COMBINATIONS, GfmMode, GflMode, Params, gfm_saturated_injection
from .dynamics import Trajectory
from .errors import HybresError, NoSolutionError
from .network import ReducedNetwork
from .regions import GridSpec, RegionMap, _to_angles

FD_STEP = 1e-7
POLISH_TOL = 1e-9
CONTOUR_TOL = 1e-6


def wrap(a):
    """Angles folded into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# --------------------------------------------------------------------------
# operating point


def reference_saturation(fault_net: ReducedNetwork, params: Params, d12: float,
                         d13: float) -> Saturation:
    """Saturated current used by static maps in CS modes.

    With the "hold" policy this is the current that would flow at the
    pre-fault angles on the faulted network, i.e. what the limiter freezes
    on fault entry.  With "fixed" it is the preset (i_sa, phi_sa).
    """
    g = params.gfm
    if g.phi_sa_policy == "fixed":
        return default_saturation(params)
    fld, _ = shadow_nc(d12, d13, fault_net, params)
    if not fld.converged[0]:
        return default_saturation(params)
    entry = complex(fld.I2[0] * np.exp(-1j * d12))
    return Saturation(*gfm_saturated_injection(entry, g))


def _mode_values(d12, d13, n, net, params, sat=None, guess=None):
    gm, fm = COMBINATIONS[n]
    fld = solve_mode_field(d12, d13, gm, fm, net, params, sat=sat, guess=guess)
    return fld, fld.p_fm - params.gfm.p_ref, fld.u_fl_q


def equilibrium(net: ReducedNetwork, params: Params, guess=(0.3, 0.3), n: int = 2,
                sat: Saturation | None = None, tol: float = 1e-12,
                max_iter: int = 30) -> AlgebraicState:
    """Equilibrium (P_FM = P_ref, u_FL_q = 0) of combination ``n`` near ``guess``.

    Newton on the two angles with a central-difference Jacobian. Raises
    :class:`NoSolutionError` when it does not converge.
    """
    z = np.array(guess, float)
    xg = None
    for _ in range(max_iter):
        pts12 = z[0] + np.array([0.0, FD_STEP, -FD_STEP, 0.0, 0.0])
        pts13 = z[1] + np.array([0.0, 0.0, 0.0, FD_STEP, -FD_STEP])
        fld, fp, fq = _mode_values(pts12, pts13, n, net, params, sat, xg)
        if not np.all(fld.converged):
            raise NoSolutionError(f"combination {n} unsolvable near ({z[0]:.6f}, {z[1]:.6f})")
        xg = fld.x[0]
        F = np.array([fp[0], fq[0]])
        if np.max(np.abs(F)) < tol:
            break
        J = np.array([[(fp[1] - fp[2]), (fp[3] - fp[4])],
                      [(fq[1] - fq[2]), (fq[3] - fq[4])]]) / (2 * FD_STEP)
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise NoSolutionError("singular equilibrium Jacobian") from exc
        lim = 0.5 / max(1.0, np.max(np.abs(step)) / 0.5)
        z = z - step * min(1.0, lim * 2)
    else:
        raise NoSolutionError(f"equilibrium of combination {n} did not converge")
    fld = solve_mode_field(z[0], z[1], *COMBINATIONS[n], net, params, sat=sat, guess=xg)
    return state_from_field(fld, 0)


def initial_equilibrium(net: ReducedNetwork, make_params, guess=(0.3, 0.3, 1.0)):
    """Pre-fault SEP together with the parameters that depend on it.

    ``make_params(u_fl)`` returns the parameter set for a GFL terminal
    voltage ``u_fl`` (the GFL nominal current follows from its power
    reference at that voltage). Returns ``(params, state)`` with the
    equilibrium solved self-consistently in combination n = 2.
    """
    def residual(z):
        d12, d13, u = z
        p = make_params(u)
        fld = solve_mode_field(d12, d13, GfmMode.NC, GflMode.NC, net, p)
        if not fld.converged[0]:
            return [1e3, 1e3, 1e3]
        return [fld.p_fm[0] - p.gfm.p_ref, fld.u_fl_q[0], fld.u_fl_dq[0].real - u]

    z, info, ier, msg = fsolve(residual, guess, xtol=1e-14, full_output=True)
    if ier != 1 and np.max(np.abs(residual(z))) > 1e-9:
        raise NoSolutionError(f"pre-fault equilibrium not found: {msg}")
    params = make_params(z[2])
    fld = solve_mode_field(z[0], z[1], GfmMode.NC, GflMode.NC, net, params)
    return params, state_from_field(fld, 0)


# --------------------------------------------------------------------------
# forces


def potential_forces(d12, d13, n: int, net: ReducedNetwork, params: Params,
                     sat: Saturation | None = None):
    """(F_FM_p, F_FL_p) of combination ``n``; NaN where unsolvable."""
    fld, fp, fq = _mode_values(d12, d13, n, net, params, sat)
    if np.ndim(d12) == 0 and np.ndim(d13) == 0:
        if not fld.converged[0]:
            raise NoSolutionError(f"combination {n} unsolvable at ({d12:.6f}, {d13:.6f})")
        return float(fp[0]), float(-params.gfl.ki_pll * fq[0])
    return fp, -params.gfl.ki_pll * fq


def force_surfaces(rm: RegionMap, params: Params):
    """Potential-force surfaces on a region map (each cell in its own combination)."""
    return rm.p_fm - params.gfm.p_ref, -params.gfl.ki_pll * rm.u_fl_q


def braking_masks(rm: RegionMap, params: Params):
    """R+ masks: where each potential force opposes motion toward increasing angle."""
    f_fm, f_fl = force_surfaces(rm, params)
    return f_fm > 0, f_fl > 0


# --------------------------------------------------------------------------
# equilibrium sets


@dataclass
class ContourPoint:
    d12: float
    d13: float
    n: int
    slope: float  # dP_FM/dd12 or du_q/dd13 at the point


@dataclass
class EquilibriumSets:
    """Zero-level branches of the two potential forces and their crossings."""

    fm_sep1: list[np.ndarray]
    fm_sep2: list[np.ndarray]
    fm_uep: list[np.ndarray]
    fl_sep: list[np.ndarray]
    fl_uep: list[np.ndarray]
    sep1: list[AlgebraicState]
    sep2: list[AlgebraicState]
    stage: str = ""
    saturation: Saturation | None = None
    max_residual: float = 0.0
    diagnostics: list[str] = field(default_factory=list)

    def branches(self) -> dict[str, list[np.ndarray]]:
        return {"fm_sep1": self.fm_sep1, "fm_sep2": self.fm_sep2, "fm_uep": self.fm_uep,
                "fl_sep": self.fl_sep, "fl_uep": self.fl_uep}


def _cell_n(rm: RegionMap, pts: np.ndarray) -> np.ndarray:
    g = rm.grid
    c = np.rint((pts[:, 0] - g.d12_min) / (g.d12_max - g.d12_min) * (g.n12 - 1)).astype(int)
    r = np.rint((pts[:, 1] - g.d13_min) / (g.d13_max - g.d13_min) * (g.n13 - 1)).astype(int)
    c = np.clip(c, 0, g.n12 - 1)
    r = np.clip(r, 0, g.n13 - 1)
    return rm.n[r, c]


def _polish(pts, ns, which, net, params, sat, iters=8):
    """Project points onto the zero set of one force, per combination.

    ``which`` is 0 for P_FM - P_ref, 1 for u_FL_q. Returns polished points,
    residuals, slopes (dP/dd12 or du_q/dd13) and a validity mask.
    """
    out = pts.copy()
    res = np.full(len(pts), np.inf)
    slope = np.full(len(pts), np.nan)
    for n in np.unique(ns):
        if n == 0:
            continue
        idx = np.flatnonzero(ns == n)
        z = out[idx].copy()
        for _ in range(iters):
            a12 = np.concatenate([z[:, 0], z[:, 0] + FD_STEP, z[:, 0] - FD_STEP, z[:, 0], z[:, 0]])
            a13 = np.concatenate([z[:, 1], z[:, 1], z[:, 1], z[:, 1] + FD_STEP, z[:, 1] - FD_STEP])
            _, fp, fq = _mode_values(a12, a13, n, net, params, sat)
            f = (fp if which == 0 else fq).reshape(5, -1)
            g0 = f[0]
            g12 = (f[1] - f[2]) / (2 * FD_STEP)
            g13 = (f[3] - f[4]) / (2 * FD_STEP)
            res[idx] = np.abs(g0)
            slope[idx] = g12 if which == 0 else g13
            nrm = g12**2 + g13**2
            done = ~np.isfinite(g0) | (np.abs(g0) < POLISH_TOL) | (nrm == 0)
            if np.all(done):
                break
            step = np.where(done, 0.0, g0 / np.where(nrm == 0, 1.0, nrm))
            step = np.clip(step, -0.05 / np.sqrt(np.maximum(nrm, 1e-30)),
                           0.05 / np.sqrt(np.maximum(nrm, 1e-30)))
            z[:, 0] -= step * g12
            z[:, 1] -= step * g13
        out[idx] = z
    ok = np.isfinite(res) & (res < CONTOUR_TOL)
    return out, res, slope, ok


def _split(pts, keep, labels):
    """Break a polyline into runs of kept points sharing a label."""
    runs, cur, lab = [], [], None
    for p, k, l in zip(pts, keep, labels):
        if k and (not cur or l == lab):
            cur.append(p)
            lab = l
            continue
        if len(cur) >= 2:
            runs.append((lab, np.array(cur)))
        cur, lab = ([p], l) if k else ([], None)
    if len(cur) >= 2:
        runs.append((lab, np.array(cur)))
    return runs


def _still_consistent(pts, ns, net, params, sat):
    """Whether each polished point is still classified as its combination."""
    ok = np.zeros(len(pts), dtype=bool)
    if len(pts) == 0:
        return ok
    cf = classify_field(pts[:, 0], pts[:, 1], net, params, sat=sat)
    for n in range(1, 7):
        m = ns == n
        ok[m] = cf.consistent[n][m]
    return ok


def equilibrium_sets(rm: RegionMap, net: ReducedNetwork, params: Params,
                     sat: Saturation | None = None) -> EquilibriumSets:
    """SEP/UEP branches and their intersections on one network stage.

    Contours are traced on the region map (each cell evaluated in its own
    combination), polished by Newton projection in the cell's combination,
    and kept only where the polished point is still consistent with it.
    """
    sat = sat if sat is not None else rm.saturation
    f_fm, f_fl = force_surfaces(rm, params)
    out = {"fm_sep1": [], "fm_sep2": [], "fm_uep": [], "fl_sep": [], "fl_uep": []}
    worst = 0.0
    for which, surf in ((0, f_fm), (1, rm.u_fl_q)):
        finite = np.isfinite(surf)
        for c in find_contours(np.where(finite, surf, 0.0), 0.0, mask=finite):
            pts = _to_angles(c, rm.grid)
            ns = _cell_n(rm, pts)
            pol, res, slope, ok = _polish(pts, ns, which, net, params, sat)
            ok &= _still_consistent(pol, ns, net, params, sat)
            if np.any(ok):
                worst = max(worst, float(np.max(res[ok])))
            if which == 0:
                labels = np.where(slope > 0, np.where(ns <= 3, "fm_sep1", "fm_sep2"), "fm_uep")
            else:
                labels = np.where(slope < 0, "fl_sep", "fl_uep")
            for lab, run in _split(pol, ok, labels):
                out[str(lab)].append(run)

    sets = EquilibriumSets(**out, sep1=[], sep2=[], stage=net.stage, saturation=sat,
                           max_residual=worst)
    for key, dest in (("fm_sep1", sets.sep1), ("fm_sep2", sets.sep2)):
        for cand in _crossings(sets.fl_sep, getattr(sets, key)):
            n = int(_cell_n(rm, np.array([cand]))[0])
            try:
                st = equilibrium(net, params, cand, n=n, sat=sat)
            except NoSolutionError:
                continue
            if not _is_sep(st, n, net, params, sat):
                continue
            if any(math.hypot(st.d12 - s.d12, st.d13 - s.d13) < 1e-6 for s in dest):
                continue
            dest.append(st)
    if not sets.sep1 and not sets.sep2:
        sets.diagnostics.append("SEP absent: no stable-branch intersection found")
    return sets


def _crossings(lines_a, lines_b) -> list[tuple[float, float]]:
    pts = []
    for a in lines_a:
        la = LineString(a)
        for b in lines_b:
            inter = la.intersection(LineString(b))
            if inter.is_empty:
                continue
            geoms = inter.geoms if hasattr(inter, "geoms") else [inter]
            for g in geoms:
                if isinstance(g, Point):
                    pts.append((g.x, g.y))
                elif not g.is_empty:
                    pts.append(tuple(g.coords[0]))
    return sorted(set(pts))


def _is_sep(st: AlgebraicState, n: int, net, params, sat) -> bool:
    """Sign conditions for a stable equilibrium and Table I consistency."""
    d = np.array([0.0, FD_STEP, -FD_STEP, 0.0, 0.0])
    e = np.array([0.0, 0.0, 0.0, FD_STEP, -FD_STEP])
    _, fp, fq = _mode_values(st.d12 + d, st.d13 + e, n, net, params, sat, np.asarray(st.x))
    dp12 = (fp[1] - fp[2]) / (2 * FD_STEP)
    dq13 = (fq[3] - fq[4]) / (2 * FD_STEP)
    try:
        cls = classify_combination(st.d12, st.d13, net, params, previous=n, sat=sat)
    except NoSolutionError:
        return False
    return bool(dp12 > 0 and dq13 < 0 and cls.n == n)


# --------------------------------------------------------------------------
# damping


def damping_coefficients(state: AlgebraicState, partials: Partials, net: ReducedNetwork,
                         params: Params) -> tuple[float, float]:
    """(D_FL_12, D_FL_13) at a solved state from its implicit partials."""
    sat = state.saturation or Saturation(0.0, 0.0)
    d12c, d13c = damping_terms(
        state.gfm_mode, state.d12, state.d13, state.u_fm, state.i_fl, state.phi_fl,
        sat.current, sat.angle,
        (partials.du_fm_d12, partials.du_fm_d13),
        (partials.di_fl_d12, partials.di_fl_d13),
        (partials.dphi_fl_d12, partials.dphi_fl_d13), net, params)
    return float(d12c), float(d13c)


@dataclass
class DampingField:
    grid: GridSpec
    d_fl_12: np.ndarray
    d_fl_13: np.ndarray
    n: np.ndarray
    braking_fm: np.ndarray
    braking_fl: np.ndarray

    def zero_contours(self) -> dict[str, list[np.ndarray]]:
        out = {}
        for name, arr in (("d_fl_12", self.d_fl_12), ("d_fl_13", self.d_fl_13)):
            finite = np.isfinite(arr)
            out[name] = [_to_angles(c, self.grid)
                         for c in find_contours(np.where(finite, arr, 0.0), 0.0, mask=finite)]
        return out


def damping_map(rm: RegionMap, net: ReducedNetwork, params: Params,
                sat: Saturation | None = None) -> DampingField:
    """Damping coefficients of every cell in its own combination."""
    sat = sat if sat is not None else rm.saturation
    D12, D13 = rm.grid.mesh()
    a = np.full(rm.n.shape, np.nan)
    b = np.full(rm.n.shape, np.nan)
    gfl = params.gfl
    for n in range(1, 7):
        m = rm.n == n
        if not np.any(m):
            continue
        gm, fm = COMBINATIONS[n]
        fld = solve_mode_field(D12[m], D13[m], gm, fm, net, params, sat=sat,
                               accept=lambda f: f.gfl_consistent(gfl))
        x, y = damping_field(fld, net, params)
        a[m] = np.broadcast_to(x, fld.d12.shape)
        b[m] = np.broadcast_to(y, fld.d12.shape)
    bf, bl = braking_masks(rm, params)
    return DampingField(rm.grid, a, b, rm.n, bf, bl)


def damping_sign_flag(w12: float, w13: float, d_fl_12: float) -> int:
    """+1 when the GFM-induced damping term brakes the GFL, -1 when it drives it."""
    v = w12 * w13
    if v == 0 or d_fl_12 == 0:
        return 0
    return 1 if math.copysign(1.0, v) * d_fl_12 > 0 else -1


# --------------------------------------------------------------------------
# energy


@dataclass
class EnergyLedger:
    t: np.ndarray
    fm_k: np.ndarray
    fm_p: np.ndarray
    fm_d: np.ndarray
    fl_k: np.ndarray
    fl_p: np.ndarray
    fl_d: np.ndarray

    @property
    def fm_residual(self) -> np.ndarray:
        return self.fm_k - self.fm_p - self.fm_d

    @property
    def fl_residual(self) -> np.ndarray:
        return self.fl_k - self.fl_p - self.fl_d


def energy_decompose(traj: Trajectory, params: Params | None = None) -> EnergyLedger:
    """Kinetic, potential and dissipated energy of each device along a trajectory.

    The potential and dissipation terms are trapezoidal line integrals over
    every node, including the duplicated nodes at events. Across a jump of
    u_FL_q (fault switching, desaturation) the PLL damping term is taken in
    its Stieltjes form, which is exact for the jump in d(delta13)/dt.
    """
    params = params or traj.params
    g, f = params.gfm, params.gfl
    s = traj.samples
    t = np.array([x.t for x in s])
    w12 = np.array([x.state.w12 for x in s])
    w13 = np.array([x.w13 for x in s])
    p = np.array([x.alg.p_fm for x in s])
    uq = np.array([x.alg.u_fl_q for x in s])
    fd = np.array([-x.d_fl_12 * x.state.w12 - x.d_fl_13 * x.w13 for x in s])

    dt = np.diff(t)
    avg = lambda y: 0.5 * (y[1:] + y[:-1])
    fm_p = avg((g.p_ref - p) * w12) * dt
    fm_d = avg(-g.d * w12 * w12) * dt
    fl_p = avg(f.ki_pll * uq * w13) * dt
    smooth = avg(fd * w13) * dt
    jump = avg(w13) * f.kp_pll * np.diff(uq)
    fl_d = np.where(dt > 0, smooth, jump)

    cum = lambda y: np.concatenate([[0.0], np.cumsum(y)])
    return EnergyLedger(
        t=t,
        fm_k=0.5 * g.j * (w12**2 - w12[0] ** 2),
        fm_p=cum(fm_p), fm_d=cum(fm_d),
        fl_k=0.5 * (w13**2 - w13[0] ** 2),
        fl_p=cum(fl_p), fl_d=cum(fl_d),
    )


# --------------------------------------------------------------------------
# dominant instability


class Verdict(str, Enum):
    GFM = "GFM"
    GFL = "GFL"
    STABLE = "stable"
    UNDETERMINED = "undetermined"


class AmbiguityError(HybresError):
    def __init__(self, message, d_fm, d_fl):
        super().__init__(message)
        self.d_fm = d_fm
        self.d_fl = d_fl


@dataclass
class InstabilityResult:
    verdict: Verdict
    t: float | None
    d_fm: float | None = None
    d_fl: float | None = None
    note: str = ""


def _tree(lines, spacing=2e-3):
    pts = []
    for line in lines:
        for a, b in zip(line[:-1], line[1:]):
            k = max(1, int(math.ceil(np.hypot(*(b - a)) / spacing)))
            s = np.linspace(0.0, 1.0, k, endpoint=False)[:, None]
            pts.append(a + s * (b - a))
        pts.append(line[-1:])
    return cKDTree(np.vstack(pts)) if pts else None


def _dist(tree, q):
    if tree is None:
        return np.full(len(q), np.inf)
    return tree.query(q)[0]


def dominant_instability(traj: Trajectory, sets: EquilibriumSets, eps_band: float = 0.02,
                         sep1: tuple[float, float] | None = None, capture: float = 0.05,
                         ek_tol: float = 1e-4) -> InstabilityResult:
    """First-swing dominant source of instability.

    Walks the samples recorded on ``sets.stage`` up to the first full slip
    (either angle moving 2 pi from its value on entering the stage). A
    sample qualifies for GFM when its GFM potential force does not brake the
    motion and it moves away from ``sep1`` along d12; GFL likewise on d13.
    The verdict is the device whose UEP branch is approached most closely
    by a qualifying sample, provided that distance is below ``eps_band``;
    its time is the first qualifying entry into the band. The window does
    not depend on ``eps_band``, so shrinking the band can only withhold a
    verdict. Angles are folded into the map window. When no verdict is
    reached the run is stable if it ends within ``capture`` of ``sep1``
    with kinetic energy below ``ek_tol`` over the final 10 %.
    """
    g, f = traj.params.gfm, traj.params.gfl
    if sep1 is None:
        if not sets.sep1:
            raise NoSolutionError("no SEP1 available for the instability walk")
        sep1 = (sets.sep1[0].d12, sets.sep1[0].d13)
    s0 = np.array(sep1)
    rows = [x for x in traj.samples if not sets.stage or x.stage == sets.stage]
    if rows:
        raw = np.array([[x.state.d12, x.state.d13] for x in rows])
        slipped = np.flatnonzero(np.any(np.abs(raw - raw[0]) >= 2 * np.pi, axis=1))
        rows = rows[:slipped[0] + 1] if slipped.size else rows
        raw = raw[:len(rows)]
        q = wrap(raw)
        rel = wrap(q - s0)
        w12 = np.array([x.state.w12 for x in rows])
        w13 = np.array([x.w13 for x in rows])
        f_fm = np.array([x.alg.p_fm - g.p_ref for x in rows])
        f_fl = np.array([-f.ki_pll * x.alg.u_fl_q for x in rows])
        raw_fm = _dist(_tree(sets.fm_uep), q)
        raw_fl = _dist(_tree(sets.fl_uep), q)
        dfm = np.where((f_fm * w12 <= 0) & (rel[:, 0] * w12 > 0), raw_fm, np.inf)
        dfl = np.where((f_fl * w13 <= 0) & (rel[:, 1] * w13 > 0), raw_fl, np.inf)
        both = np.flatnonzero((dfm < eps_band) & (dfl < eps_band))
        if both.size:
            k = both[0]
            raise AmbiguityError(f"both UEP bands entered at t={rows[k].t:.6f}",
                                 float(raw_fm[k]), float(raw_fl[k]))
        best_fm, best_fl = np.min(dfm), np.min(dfl)
        if min(best_fm, best_fl) < eps_band:
            which, d = (Verdict.GFM, dfm) if best_fm <= best_fl else (Verdict.GFL, dfl)
            k = int(np.flatnonzero(d < eps_band)[0])
            return InstabilityResult(which, rows[k].t, float(raw_fm[k]), float(raw_fl[k]))

    grid = traj.grid()
    if not grid:
        return InstabilityResult(Verdict.UNDETERMINED, None, note="empty trajectory")
    last = grid[-1]
    end = wrap(np.array([last.state.d12, last.state.d13]) - s0)
    tail = grid[int(0.9 * len(grid)):]
    ek = max(0.5 * g.j * x.state.w12**2 + 0.5 * x.w13**2 for x in tail)
    if not traj.truncated and np.hypot(*end) <= capture and ek < ek_tol:
        return InstabilityResult(Verdict.STABLE, None)
    return InstabilityResult(
        Verdict.UNDETERMINED, None,
        note=f"end distance to SEP1 {np.hypot(*end):.4f} rad, final kinetic energy {ek:.3e}")
