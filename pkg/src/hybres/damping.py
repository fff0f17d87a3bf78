"""Two-dimensional damping coefficients of the GFL PLL.

The time derivative of the GFL q-axis voltage splits into one term per
angular velocity, ``du_q/dt = -(D12 * w12 + D13 * w13) / Kp``.  The
coefficients below are written out term by term from the q-axis voltage
expression of each GFM mode, so they can be checked against finite
differences of the solved network.
"""

from __future__ import annotations

import numpy as np

from .algebraic import ModeField, partials_field
from .devices import GfmMode, Params
from .network import ReducedNetwork


def _p(M, i, j):
    z = M[i - 1, j - 1]
    return abs(z), np.angle(z)


def damping_terms(gfm_mode, d12, d13, u_fm, i_fl, phi_fl, sat_i, sat_phi,
                  dU, dI, dphi, net: ReducedNetwork, params: Params):
    """(D_FL_12, D_FL_13) from the state and its implicit partials.

    ``dU``, ``dI``, ``dphi`` are pairs (d/d12, d/d13); ``dU`` is ignored
    under saturation. Vectorised.
    """
    kp = params.gfl.kp_pll
    us = net.u_sys
    if GfmMode(gfm_mode) is GfmMode.NC:
        M = net.m_nc
        m31, a31 = _p(M, 3, 1)
        m32, a32 = _p(M, 3, 2)
        m33, a33 = _p(M, 3, 3)
        th = a32 + d12 - d13
        ph = a33 + phi_fl
        d_12 = (-m32 * dU[0] * np.sin(th)
                - m32 * u_fm * np.cos(th)
                - m33 * dI[0] * np.sin(ph)
                - m33 * dphi[0] * i_fl * np.cos(ph))
        d_13 = (m31 * us * np.cos(a31 - d13)
                - m32 * dU[1] * np.sin(th)
                + m32 * u_fm * np.cos(th)
                - m33 * dI[1] * np.sin(ph)
                - m33 * dphi[1] * i_fl * np.cos(ph))
    else:
        M = net.m_cs
        m31, a31 = _p(M, 3, 1)
        m32, a32 = _p(M, 3, 2)
        m33, a33 = _p(M, 3, 3)
        th = a32 + sat_phi + d12 - d13
        ph = a33 + phi_fl
        d_12 = (-m32 * sat_i * np.cos(th)
                - m33 * dI[0] * np.sin(ph)
                - m33 * dphi[0] * i_fl * np.cos(ph))
        d_13 = (m31 * us * np.cos(a31 - d13)
                + m32 * sat_i * np.cos(th)
                - m33 * dI[1] * np.sin(ph)
                - m33 * dphi[1] * i_fl * np.cos(ph))
    return kp * d_12, kp * d_13


def damping_field(fld: ModeField, net: ReducedNetwork, params: Params):
    """Damping coefficients at every point of a solved batch."""
    dx = partials_field(fld, net, params)
    if fld.gfm_mode is GfmMode.NC:
        dU = (dx[:, 0, 0], dx[:, 0, 1])
        u_fm = fld.x[:, 0]
    else:
        dU = (0.0, 0.0)
        u_fm = np.abs(fld.U2)
    dI = (dx[:, -2, 0], dx[:, -2, 1])
    dphi = (dx[:, -1, 0], dx[:, -1, 1])
    return damping_terms(fld.gfm_mode, fld.d12, fld.d13, u_fm, fld.i_fl, fld.phi_fl,
                         fld.sat_i, fld.sat_phi, dU, dI, dphi, net, params)
