"""Converter parameter records and their algebraic control laws."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ValidationError

HALF_PI = 0.5 * math.pi


class GfmMode(str, Enum):
    NC = "NC"
    CS = "CS"


class GflMode(str, Enum):
    LVRT = "LVRT"
    NC = "NC"
    HVRT = "HVRT"


# Control combination n of the six-region structure.
COMBINATIONS: dict[int, tuple[GfmMode, GflMode]] = {
    1: (GfmMode.NC, GflMode.LVRT),
    2: (GfmMode.NC, GflMode.NC),
    3: (GfmMode.NC, GflMode.HVRT),
    4: (GfmMode.CS, GflMode.LVRT),
    5: (GfmMode.CS, GflMode.NC),
    6: (GfmMode.CS, GflMode.HVRT),
}
_COMBINATION_OF = {v: k for k, v in COMBINATIONS.items()}


def modes_of(n: int) -> tuple[GfmMode, GflMode]:
    return COMBINATIONS[n]


def combination_of(gfm: GfmMode, gfl: GflMode) -> int:
    return _COMBINATION_OF[(GfmMode(gfm), GflMode(gfl))]


@dataclass(frozen=True)
class GfmParams:
    """Grid-forming converter (virtual synchronous machine with Q-V droop).

    Currents are absolute per-unit magnitudes. ``i_sa`` defaults to
    ``i_max``; ``phi_sa`` is only used with ``phi_sa_policy="fixed"``.
    """

    p_ref: float
    q_ref: float
    u0: float
    j: float
    d: float
    k_q: float
    i_max: float
    i_sa: float | None = None
    phi_sa_policy: str = "hold"
    phi_sa: float = 0.0

    def __post_init__(self):
        if self.i_sa is None:
            object.__setattr__(self, "i_sa", self.i_max)
        if self.j <= 0:
            raise ValidationError("gfm.j", "virtual inertia must be positive")
        if self.d < 0:
            raise ValidationError("gfm.d", "virtual damping must be non-negative")
        if self.i_max <= 0:
            raise ValidationError("gfm.i_max", "current limit must be positive")
        if self.i_sa > self.i_max:
            raise ValidationError("gfm.i_sa", "saturated current must not exceed i_max")
        if self.phi_sa_policy not in ("hold", "fixed"):
            raise ValidationError("gfm.phi_sa_policy", "must be 'hold' or 'fixed'")


@dataclass(frozen=True)
class GflParams:
    """Grid-following converter with PI-PLL and voltage ride-through laws."""

    p_ref: float
    q_ref: float
    i0: float
    phi0: float
    i_max: float
    k_i_lvrt: float
    k_phi_lvrt: float
    k_i_hvrt: float
    k_phi_hvrt: float
    u_lv: float = 0.9
    u_hv: float = 1.1
    kp_pll: float = 10.0
    ki_pll: float = 100.0

    def __post_init__(self):
        if not 0 < self.u_lv < self.u_hv:
            raise ValidationError("gfl.u_lv", "requires 0 < u_lv < u_hv")
        if self.i_max < self.i0:
            raise ValidationError("gfl.i_max", "current limit below nominal current")
        if self.kp_pll <= 0 or self.ki_pll <= 0:
            raise ValidationError("gfl.kp_pll", "PLL gains must be positive")


@dataclass(frozen=True)
class Params:
    gfm: GfmParams
    gfl: GflParams


def gfl_mode_of(u_fl: float, p: GflParams) -> GflMode:
    if u_fl < p.u_lv:
        return GflMode.LVRT
    if u_fl > p.u_hv:
        return GflMode.HVRT
    return GflMode.NC


def gfl_law(u, mode: GflMode | None, p: GflParams):
    """Injection magnitude, angle and their slopes with respect to ``u``.

    Vectorised over ``u``. ``mode=None`` applies the law of whichever
    interval ``u`` falls in; the combined law is continuous in ``u``.
    Returns ``(I, phi, dI/du, dphi/du)``; slopes are zero on a clamp.
    Both ramps clamp the angle to [-pi/2, pi/2] on either side, so a law
    evaluated outside its own voltage interval stays bounded.
    """
    u = np.asarray(u, dtype=float)
    if mode is None:
        out = [np.empty_like(u) for _ in range(4)]
        masks = {
            GflMode.LVRT: u < p.u_lv,
            GflMode.HVRT: u > p.u_hv,
            GflMode.NC: (u >= p.u_lv) & (u <= p.u_hv),
        }
        for m, mask in masks.items():
            if np.any(mask):
                vals = gfl_law(u[mask], m, p)
                for o, v in zip(out, vals):
                    o[mask] = v
        # NaN voltages fall in no interval
        nan = ~(masks[GflMode.LVRT] | masks[GflMode.HVRT] | masks[GflMode.NC])
        for o in out:
            o[nan] = np.nan
        return tuple(out)

    mode = GflMode(mode)
    if mode is GflMode.NC:
        return (np.full_like(u, p.i0), np.full_like(u, p.phi0),
                np.zeros_like(u), np.zeros_like(u))
    if mode is GflMode.LVRT:
        i_lin = p.k_i_lvrt * (p.u_lv - u) + p.i0
        phi_lin = p.k_phi_lvrt * (u - p.u_lv) + p.phi0
        di = np.where(i_lin < p.i_max, -p.k_i_lvrt, 0.0)
        dphi = np.where(np.abs(phi_lin) < HALF_PI, p.k_phi_lvrt, 0.0)
        return np.minimum(i_lin, p.i_max), np.clip(phi_lin, -HALF_PI, HALF_PI), di, dphi
    i_lin = p.k_i_hvrt * (u - p.u_hv) + p.i0
    phi_lin = p.k_phi_hvrt * (u - p.u_hv) + p.phi0
    di = np.where(i_lin < p.i_max, p.k_i_hvrt, 0.0)
    dphi = np.where(np.abs(phi_lin) < HALF_PI, p.k_phi_hvrt, 0.0)
    return np.minimum(i_lin, p.i_max), np.clip(phi_lin, -HALF_PI, HALF_PI), di, dphi


def gfl_injection(u_fl: float, mode: GflMode, p: GflParams) -> tuple[float, float]:
    """Current magnitude and angle (PLL frame) commanded at PCC voltage ``u_fl``."""
    i, phi, _, _ = gfl_law(u_fl, mode, p)
    return float(i), float(phi)


def gfm_voltage_ref(q_fm, p: GfmParams):
    return p.k_q * (p.q_ref - q_fm) + p.u0


def gfm_saturated_injection(entry_current: complex, p: GfmParams) -> tuple[float, float]:
    """Frozen (magnitude, angle) of the GFM current while saturated.

    ``entry_current`` is the terminal current phasor in the GFM's own frame
    at the instant of saturation.
    """
    if p.phi_sa_policy == "fixed":
        return p.i_sa, p.phi_sa
    return p.i_sa, cmath.phase(entry_current)


def gfl_nominal_injection(p_ref: float, q_ref: float, u_fl: float) -> tuple[float, float]:
    """Nominal (I_0, phi_0) delivering (p_ref, q_ref) at a d-axis voltage ``u_fl``."""
    return math.hypot(p_ref, q_ref) / u_fl, -math.atan2(q_ref, p_ref)


def _clamp_angle(phi, slope):
    if phi <= -HALF_PI:
        return -HALF_PI, 0.0
    if phi >= HALF_PI:
        return HALF_PI, 0.0
    return phi, slope


def gfl_law_at(u: float, mode: GflMode, p: GflParams):
    """Scalar :func:`gfl_law` for a definite mode, without array overhead."""
    if mode is GflMode.NC:
        return p.i0, p.phi0, 0.0, 0.0
    if mode is GflMode.LVRT:
        i_lin = p.k_i_lvrt * (p.u_lv - u) + p.i0
        phi_lin = p.k_phi_lvrt * (u - p.u_lv) + p.phi0
        i, di = (i_lin, -p.k_i_lvrt) if i_lin < p.i_max else (p.i_max, 0.0)
        phi, dphi = _clamp_angle(phi_lin, p.k_phi_lvrt)
        return i, phi, di, dphi
    i_lin = p.k_i_hvrt * (u - p.u_hv) + p.i0
    phi_lin = p.k_phi_hvrt * (u - p.u_hv) + p.phi0
    i, di = (i_lin, p.k_i_hvrt) if i_lin < p.i_max else (p.i_max, 0.0)
    phi, dphi = _clamp_angle(phi_lin, p.k_phi_hvrt)
    return i, phi, di, dphi
