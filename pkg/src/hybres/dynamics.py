"""Switched dynamics of the GFM swing equation and GFL PLL through a fault.

Integration is classical fixed-step RK4 on the state (d12, w12, d13, x_pll).
At the end of every step the switching functions of the active combination
are re-evaluated; a sign change triggers bisection on the step length until
the crossing function is below ``EVENT_TOL``, the combination is updated and
integration restarts from the event point.  Saturation of the GFL ramps
(clamp kinks) is localised the same way so every segment stays smooth.
"""

from __future__ import annotations

import cmath
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algebraic import (
    AlgebraicState,
    PointSolution,
    Saturation,
    default_saturation,
    shadow_nc,
    solve_point,
    table_condition,
)
from .damping import damping_terms
from .devices import (
    COMBINATIONS,
    HALF_PI,
    GfmMode,
    GflMode,
    Params,
    combination_of,
    gfl_mode_of,
    gfm_saturated_injection,
)
from .errors import ChatteringError, NoSolutionError
from .network import FaultStage, ReducedNetwork

logger = logging.getLogger(__name__)

EVENT_TOL = 1e-9


@dataclass(frozen=True)
class DynamicState:
    d12: float
    w12: float
    d13: float
    x_pll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d12, self.w12, self.d13, self.x_pll])

    @classmethod
    def from_array(cls, y) -> "DynamicState":
        return cls(*(float(v) for v in y))


def rhs(state: DynamicState, algebraic: AlgebraicState, params: Params) -> DynamicState:
    """Time derivative of ``state`` given the algebraic solution at its angles."""
    return DynamicState.from_array(_deriv(state.as_array(), algebraic.p_fm, algebraic.u_fl_q, params))


def _deriv(y, p_fm, u_q, params):
    g, f = params.gfm, params.gfl
    return np.array([
        y[1],
        (g.p_ref - p_fm - g.d * y[1]) / g.j,
        f.kp_pll * u_q + y[3],
        f.ki_pll * u_q,
    ])


@dataclass(frozen=True)
class Event:
    t: float
    n_old: int
    n_new: int
    condition: str
    g: float = 0.0


@dataclass
class Sample:
    t: float
    state: DynamicState
    alg: AlgebraicState
    stage: str
    on_grid: bool
    w13: float
    d_fl_12: float
    d_fl_13: float


@dataclass
class Trajectory:
    """Samples on the uniform grid plus the extra nodes at events.

    ``samples`` holds every node in time order; two nodes share a time at
    each event (before and after the switch).  ``grid()`` returns only the
    uniform-step samples.
    """

    samples: list[Sample]
    events: list[Event]
    params: Params
    dt: float
    stage_changes: list[tuple[float, str]] = field(default_factory=list)
    breakpoints: list[tuple[float, str]] = field(default_factory=list)
    truncated: bool = False
    diagnostic: str | None = None

    def grid(self) -> list[Sample]:
        return [s for s in self.samples if s.on_grid]

    def column(self, name: str, grid_only: bool = True) -> np.ndarray:
        rows = self.grid() if grid_only else self.samples
        return np.array([_get(s, name, self.params) for s in rows])


def _get(s: Sample, name: str, params: Params) -> float:
    g, f = params.gfm, params.gfl
    if name == "t":
        return s.t
    if name in ("d12", "w12", "d13", "x_pll"):
        return getattr(s.state, name)
    if name in ("w13", "d_fl_12", "d_fl_13"):
        return getattr(s, name)
    if name == "n":
        return s.alg.n
    if name == "F_FM_p":
        return -(g.p_ref - s.alg.p_fm)
    if name == "F_FM_d":
        return g.d * s.state.w12
    if name == "F_FL_p":
        return -f.ki_pll * s.alg.u_fl_q
    if name == "F_FL_d_12":
        return -s.d_fl_12 * s.state.w12
    if name == "F_FL_d_13":
        return -s.d_fl_13 * s.w13
    return getattr(s.alg, name)


# --------------------------------------------------------------------------


@dataclass
class _Mode:
    n: int
    sat: Saturation | None = None

    @property
    def gfm(self) -> GfmMode:
        return COMBINATIONS[self.n][0]

    @property
    def gfl(self) -> GflMode:
        return COMBINATIONS[self.n][1]


@dataclass
class _Point:
    """Solved algebraic point of the active mode, with its monitor values."""

    y: np.ndarray
    sol: PointSolution
    shadow: PointSolution | None
    proxy: float
    monitors: dict


class _Lost(Exception):
    pass


class _Integrator:
    def __init__(self, nets: dict[str, ReducedNetwork], params: Params,
                 fault: FaultStage | None, max_events_per_step: int):
        self.nets = nets
        self.params = params
        self.fault = fault
        self.max_events = max_events_per_step
        self.guess: dict[int, list] = {}
        self.shadow_guess: list | None = None
        self.shadow_mode: GflMode = GflMode.NC

    # -- algebraic evaluation -------------------------------------------

    def solve(self, y, mode: _Mode, stage: str, shadow: bool = True) -> _Point:
        gm, fm = COMBINATIONS[mode.n]
        sol = solve_point(y[0], y[2], gm, fm, self.nets[stage], self.params, sat=mode.sat,
                          guess=self.guess.get(mode.n))
        if sol is None:
            raise _Lost()
        sh, proxy = None, sol.i_fm
        if gm is GfmMode.CS:
            proxy = math.inf
            if shadow:
                sh = self.shadow(y, stage)
                if sh is not None:
                    proxy = sh.i_fm
        return _Point(np.array(y, float), sol, sh, proxy, self.monitors(mode, sol.u_fl, proxy))

    def shadow(self, y, stage: str) -> PointSolution | None:
        """NC solution under whichever GFL law its own voltage selects."""
        net, prm = self.nets[stage], self.params
        order = [self.shadow_mode] + [m for m in GflMode if m is not self.shadow_mode]
        if self.shadow_guess is not None:
            for fm in order:
                sol = solve_point(y[0], y[2], GfmMode.NC, fm, net, prm,
                                  guess=self.shadow_guess, fallback=False)
                if sol is not None and gfl_mode_of(sol.u_fl, prm.gfl) is fm:
                    return sol
        fld, _ = shadow_nc(y[0], y[2], net, prm, guess=self.shadow_guess)
        if not fld.converged[0]:
            return None
        fm = gfl_mode_of(float(fld.u_fl[0]), prm.gfl)
        return solve_point(y[0], y[2], GfmMode.NC, fm, net, prm, guess=fld.x[0])

    def monitors(self, mode: _Mode, u: float, proxy: float) -> dict:
        g, f = self.params.gfm, self.params.gfl
        mon = {"gfm": proxy - g.i_max}
        if mode.gfl is not GflMode.HVRT:
            mon["lv"] = u - f.u_lv
        if mode.gfl is not GflMode.LVRT:
            mon["hv"] = u - f.u_hv
        if mode.gfl is GflMode.LVRT:
            mon["clamp_i"] = f.k_i_lvrt * (f.u_lv - u) + f.i0 - f.i_max
            mon["clamp_phi"] = f.k_phi_lvrt * (u - f.u_lv) + f.phi0 + HALF_PI
        elif mode.gfl is GflMode.HVRT:
            mon["clamp_i"] = f.k_i_hvrt * (u - f.u_hv) + f.i0 - f.i_max
            mon["clamp_phi"] = f.k_phi_hvrt * (u - f.u_hv) + f.phi0 - HALF_PI
        return mon

    @staticmethod
    def flags(mon: dict) -> dict:
        # Table I closes the NC interval, so U = U_LV already counts as NC
        return {k: (v >= 0) if k == "lv" else (v > 0) for k, v in mon.items()}

    def remember(self, pt: _Point, mode: _Mode):
        self.guess[mode.n] = list(pt.sol.x)
        if pt.shadow is not None:
            self.shadow_guess = list(pt.shadow.x)
            self.shadow_mode = pt.shadow.gfl_mode
        elif mode.gfm is GfmMode.NC:
            self.shadow_guess = list(pt.sol.x)
            self.shadow_mode = mode.gfl

    # -- one RK4 step in a fixed mode -------------------------------------

    def advance(self, p0: _Point, h: float, mode: _Mode, stage: str) -> _Point:
        y0 = p0.y
        k1 = self._f(y0, p0.sol)
        k2 = self._f_at(y0 + 0.5 * h * k1, mode, stage)
        k3 = self._f_at(y0 + 0.5 * h * k2, mode, stage)
        k4 = self._f_at(y0 + h * k3, mode, stage)
        y1 = y0 + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return self.solve(y1, mode, stage)

    def _f(self, y, sol: PointSolution):
        return _deriv(y, sol.p_fm, sol.u_fl_q, self.params)

    def _f_at(self, y, mode, stage):
        return self._f(y, self.solve(y, mode, stage, shadow=False).sol)

    # -- mode selection ---------------------------------------------------

    def select(self, y, stage: str, mode: _Mode | None) -> tuple[_Mode, _Point]:
        """Self-consistent combination at ``y``; ``mode`` is kept when still consistent."""
        prm = self.params
        if mode is not None:
            try:
                pt = self.solve(y, mode, stage)
                if self._consistent(mode, pt):
                    return mode, pt
            except _Lost:
                pass
        sh = self.shadow(y, stage)
        if sh is not None and sh.i_fm <= prm.gfm.i_max:
            cand = _Mode(sh.n)
            self.guess[cand.n] = list(sh.x)
            try:
                pt = self.solve(y, cand, stage)
                if self._consistent(cand, pt):
                    return cand, pt
            except _Lost:
                pass
        if mode is not None and mode.gfm is GfmMode.CS:
            sat = mode.sat
        elif sh is not None:
            entry = sh.I2 * cmath.exp(-1j * y[0])
            sat = Saturation(*gfm_saturated_injection(entry, prm.gfm))
        else:
            sat = default_saturation(prm)
        order = [GflMode.LVRT, GflMode.NC, GflMode.HVRT]
        if mode is not None:
            order.remove(mode.gfl)
            order.insert(0, mode.gfl)
        for fm in order:
            cand = _Mode(combination_of(GfmMode.CS, fm), sat)
            try:
                pt = self.solve(y, cand, stage)
            except _Lost:
                continue
            if self._consistent(cand, pt):
                return cand, pt
        raise NoSolutionError(f"no self-consistent combination at d12={y[0]:.6f}, d13={y[2]:.6f}")

    def _consistent(self, mode: _Mode, pt: _Point) -> bool:
        return bool(table_condition(mode.n, pt.proxy, pt.sol.u_fl, self.params))

    def transition(self, pt: _Point, mode: _Mode, changed: list[str], stage: str):
        """New mode after monitors in ``changed`` flipped at ``pt``."""
        y = pt.y
        prm = self.params
        gm, fm = mode.gfm, mode.gfl
        cand = None
        if "gfm" in changed:
            if gm is GfmMode.NC:
                entry = pt.sol.I2 * cmath.exp(-1j * y[0])
                sat = Saturation(*gfm_saturated_injection(entry, prm.gfm))
                cand = _Mode(combination_of(GfmMode.CS, fm), sat)
                self.guess[cand.n] = list(pt.sol.x[1:])
            elif pt.shadow is not None:
                cand = _Mode(pt.shadow.n)
                self.guess[cand.n] = list(pt.shadow.x)
        elif "lv" in changed or "hv" in changed:
            cand = _Mode(combination_of(gm, gfl_mode_of(pt.sol.u_fl, prm.gfl)), mode.sat)
            self.guess[cand.n] = list(pt.sol.x)
        if cand is not None:
            try:
                new_pt = self.solve(y, cand, stage)
                if self._consistent(cand, new_pt):
                    return cand, new_pt
            except _Lost:
                pass
        return self.select(y, stage, None)


def integrate(initial: DynamicState, nets: dict[str, ReducedNetwork], params: Params,
              fault: FaultStage | None, t_end: float, dt: float,
              initial_n: int | None = None, max_events_per_step: int = 100) -> Trajectory:
    """Integrate the switched system from ``initial`` over [0, t_end].

    ``nets`` maps stage names to reduced networks. With ``fault=None`` the
    pre-fault network is used throughout. Raises :class:`ChatteringError`
    (carrying the partial trajectory) when a single step holds more than
    ``max_events_per_step`` events.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    itg = _Integrator(nets, params, fault, max_events_per_step)
    stage = "prefault"
    y = initial.as_array()
    mode = _Mode(initial_n) if initial_n is not None else None
    mode, pt = itg.select(y, stage, mode)
    itg.remember(pt, mode)

    traj = Trajectory([], [], params, dt)
    switch_times = []
    if fault is not None:
        switch_times = [(fault.t_start, "fault"), (fault.t_clear, "postfault")]
    n_steps = int(round(t_end / dt))

    def record(t, pt, on_grid):
        traj.samples.append(_sample(t, pt, stage, on_grid, params, itg.nets[stage]))

    t = 0.0
    record(t, pt, True)
    k = 0
    try:
        while k < n_steps:
            # stage transitions due exactly now
            while switch_times and switch_times[0][0] <= t + 1e-12:
                _, new_stage = switch_times.pop(0)
                stage = new_stage
                old = mode.n
                mode, pt = itg.select(pt.y, stage, mode)
                itg.remember(pt, mode)
                traj.stage_changes.append((t, stage))
                record(t, pt, False)
                if mode.n != old:
                    traj.events.append(Event(t, old, mode.n, f"stage:{stage}"))
            t_grid = (k + 1) * dt
            target = t_grid
            if switch_times and switch_times[0][0] < t_grid - 1e-12:
                target = switch_times[0][0]
            events_here = 0
            while t < target - 1e-15:
                h = target - t
                pt_new, changed, h_used, p_lo, h_lo = _step(itg, pt, h, mode, stage)
                if not changed:
                    t = target
                    pt = pt_new
                    itg.remember(pt, mode)
                    continue
                # last point on the old side, then the crossing itself
                record(t + h_lo, p_lo, False)
                t, pt = (target if h_used == h else t + h_used), pt_new
                record(t, pt, False)
                mode_changes = [c for c in changed if not c.startswith("clamp")]
                if not mode_changes:
                    traj.breakpoints.append((t, ",".join(changed)))
                    itg.remember(pt, mode)
                    continue
                old = mode.n
                g_val = max(abs(pt.monitors.get(c, 0.0)) for c in mode_changes)
                mode, pt = itg.transition(pt, mode, mode_changes, stage)
                itg.remember(pt, mode)
                traj.events.append(Event(t, old, mode.n, ",".join(mode_changes), g_val))
                record(t, pt, False)
                events_here += 1
                if events_here > max_events_per_step:
                    raise ChatteringError(f"more than {max_events_per_step} events near t={t:.6f}")
            if target == t_grid:
                t = t_grid
                k += 1
                record(t, pt, True)
    except NoSolutionError as exc:
        traj.truncated = True
        traj.diagnostic = f"algebraic breakdown at t={t:.6f}: {exc}"
        logger.warning(traj.diagnostic)
    except _Lost:
        traj.truncated = True
        traj.diagnostic = f"algebraic breakdown at t={t:.6f}: mode {mode.n} lost its solution"
        logger.warning(traj.diagnostic)
    except ChatteringError as exc:
        traj.truncated = True
        traj.diagnostic = str(exc)
        exc.trajectory = traj
        raise
    return traj


def _step(itg: _Integrator, p0: _Point, h: float, mode: _Mode, stage: str):
    """Advance by ``h`` or up to the first monitor crossing.

    Returns ``(point, changed_monitors, step_taken, last_point_before, step_before)``;
    the last two describe the latest point found on the original side of
    every switching function.
    """
    f0 = itg.flags(p0.monitors)
    try:
        p1 = itg.advance(p0, h, mode, stage)
        if itg.flags(p1.monitors) == f0:
            return p1, [], h, p1, h
    except _Lost:
        p1 = None
    lo, hi, p_hi, p_lo = 0.0, h, p1, p0
    while True:
        mid = 0.5 * (lo + hi)
        try:
            pm = itg.advance(p0, mid, mode, stage)
        except _Lost:
            pm = None
        if pm is not None and itg.flags(pm.monitors) == f0:
            lo, p_lo = mid, pm
        else:
            hi, p_hi = mid, pm
        if p_hi is not None:
            fh = itg.flags(p_hi.monitors)
            changed = [k for k in f0 if fh.get(k) != f0[k]]
            if changed and all(abs(p_hi.monitors[k]) < EVENT_TOL for k in changed):
                return p_hi, changed, hi, p_lo, lo
        if hi - lo < 1e-14 * max(1.0, h):
            if p_hi is not None:
                fh = itg.flags(p_hi.monitors)
                return p_hi, [k for k in f0 if fh.get(k) != f0[k]], hi, p_lo, lo
            if lo == 0.0:
                raise _Lost()
            return p_lo, ["lost"], lo, p_lo, lo


def _sample(t, pt: _Point, stage, on_grid, params: Params, net: ReducedNetwork) -> Sample:
    sol = pt.sol
    y = pt.y
    alg = sol.state(pt.proxy)
    dx = sol.partials()
    if dx is None:
        d12c = d13c = math.nan
    else:
        dU = dx[0] if sol.gfm_mode is GfmMode.NC else (0.0, 0.0)
        d12c, d13c = damping_terms(sol.gfm_mode, sol.d12, sol.d13, alg.u_fm, sol.i_fl,
                                   sol.phi_fl, sol.sat_i, sol.sat_phi, dU, dx[-2], dx[-1],
                                   net, params)
    w13 = params.gfl.kp_pll * alg.u_fl_q + float(y[3])
    return Sample(float(t), DynamicState.from_array(y), alg, stage, on_grid, w13,
                  float(d12c), float(d13c))


# --------------------------------------------------------------------------
# export

TRAJECTORY_COLUMNS = (
    ("t", "t"), ("delta12", "d12"), ("omega12", "w12"), ("delta13", "d13"),
    ("ddelta13_dt", "w13"), ("n", "n"), ("U_FM", "u_fm"), ("U_FL", "u_fl"),
    ("u_FL_q", "u_fl_q"), ("I_FL", "i_fl"), ("phi_FL", "phi_fl"), ("P_FM", "p_fm"),
    ("I_FM_proxy", "i_fm_proxy"), ("F_FL_d_12", "F_FL_d_12"), ("F_FL_d_13", "F_FL_d_13"),
)


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    """Uniform-grid samples in the fixed column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([h for h, _ in TRAJECTORY_COLUMNS])
        for s in traj.grid():
            row = []
            for _, key in TRAJECTORY_COLUMNS:
                v = _get(s, key, traj.params)
                row.append(str(int(v)) if key == "n" else f"{v:.12g}")
            w.writerow(row)


def write_events_csv(path: str | Path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "n_old", "n_new", "condition"])
        for e in traj.events:
            w.writerow([f"{e.t:.12g}", e.n_old, e.n_new, e.condition])
