import numpy as np
import pytest

from hybres.algebraic import implicit_partials, solve_mode_field, solve_mode_state
from hybres.analysis import damping_coefficients
from hybres.damping import damping_field
from hybres.devices import COMBINATIONS


def uq_at(d12, d13, n, net, params, sat, guess):
    gm, fm = COMBINATIONS[n]
    return solve_mode_field(d12, d13, gm, fm, net, params, sat=sat, guess=guess).u_fl_q[0]


def smooth_point(fld, params, n):
    """True when the point is inside its GFL interval and off every clamp."""
    g = params.gfl
    u = fld.u_fl[0]
    if not fld.converged[0]:
        return False
    mode = COMBINATIONS[n][1].value
    if mode == "LVRT" and not u < g.u_lv - 1e-3:
        return False
    if mode == "HVRT" and not u > g.u_hv + 1e-3:
        return False
    if mode == "NC" and not g.u_lv + 1e-3 < u < g.u_hv - 1e-3:
        return False
    i, phi = fld.i_fl[0], fld.phi_fl[0]
    return abs(i - g.i_max) > 1e-3 and abs(abs(phi) - np.pi / 2) > 1e-3


def test_cs_nc_closed_form(nets, params, sat):
    net = nets["postfault"]
    kp = params.gfl.kp_pll
    m32 = net.m_cs[2, 1]
    for d12, d13 in ((0.5, 0.1), (2.0, -1.0), (-0.7, 0.4)):
        fld = solve_mode_field(d12, d13, "CS", "NC", net, params, sat=sat)
        d_12, _ = damping_field(fld, net, params)
        expect = -abs(m32) * sat.current * np.cos(np.angle(m32) + sat.angle + d12 - d13)
        assert d_12[0] / kp == pytest.approx(expect, abs=1e-14)


@pytest.mark.parametrize("n", range(1, 7))
def test_coefficients_match_uq_gradient(nets, params, sat, rng, n):
    """Analytic coefficients equal -Kp times the finite-difference gradient of u_q."""
    net = nets["postfault"]
    kp = params.gfl.kp_pll
    gm, fm = COMBINATIONS[n]
    done = 0
    for d12, d13 in rng.uniform(-np.pi, np.pi, (200, 2)):
        fld = solve_mode_field(d12, d13, gm, fm, net, params, sat=sat)
        if not smooth_point(fld, params, n):
            continue
        a, b = damping_field(fld, net, params)
        h = 1e-6
        x0 = fld.x[0]
        g12 = (uq_at(d12 + h, d13, n, net, params, sat, x0)
               - uq_at(d12 - h, d13, n, net, params, sat, x0)) / (2 * h)
        g13 = (uq_at(d12, d13 + h, n, net, params, sat, x0)
               - uq_at(d12, d13 - h, n, net, params, sat, x0)) / (2 * h)
        for analytic, fd in ((a[0], -kp * g12), (b[0], -kp * g13)):
            assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1e-2 * kp)
        done += 1
        if done >= 6:
            break
    assert done >= 3


def test_trajectory_reconstruction(nets, params, sat, rng):
    net = nets["postfault"]
    kp = params.gfl.kp_pll
    for n in (2, 5):
        gm, fm = COMBINATIONS[n]
        for d12, d13 in rng.uniform(-0.8, 0.8, (5, 2)):
            fld = solve_mode_field(d12, d13, gm, fm, net, params, sat=sat)
            w12, w13 = rng.uniform(-2, 2, 2)
            a, b = damping_field(fld, net, params)
            h = 1e-6
            x0 = fld.x[0]
            rate = (uq_at(d12 + w12 * h, d13 + w13 * h, n, net, params, sat, x0)
                    - uq_at(d12 - w12 * h, d13 - w13 * h, n, net, params, sat, x0)) / (2 * h)
            pred = -(a[0] * w12 + b[0] * w13) / kp
            assert abs(pred - rate) <= 1e-3 * max(abs(rate), 1e-6)


def test_state_api_matches_field(nets, params, sat):
    net = nets["postfault"]
    s = solve_mode_state(0.4, 0.3, "NC", "NC", net, params)
    p = implicit_partials(s, net, params)
    d = damping_coefficients(s, p, net, params)
    fld = solve_mode_field(0.4, 0.3, "NC", "NC", net, params)
    a, b = damping_field(fld, net, params)
    assert d == pytest.approx((a[0], b[0]), rel=1e-12)


def test_negative_near_sep1(nets, params, sep1, rng):
    net = nets["postfault"]
    pts = sep1.d12 + rng.uniform(-0.3, 0.3, 60), sep1.d13 + rng.uniform(-0.3, 0.3, 60)
    fld = solve_mode_field(*pts, "NC", "NC", net, params)
    a, _ = damping_field(fld, net, params)
    ok = np.isfinite(a)
    assert np.mean(a[ok] < 0) >= 0.9
