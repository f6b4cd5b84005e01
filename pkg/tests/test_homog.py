from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from qphj import effective, fitting, homog
from qphj.errors import ConfigError
from qphj.homog import InitialData
from qphj.torus import A1, constant_potential, prototype_potential

FREE = constant_potential(0.0)
P1 = prototype_potential(A1, 1.0)


@pytest.fixture(scope="module")
def M1():
    return effective.build_model(P1)


def test_initial_data_kinds():
    cone = InitialData.cone(1.0, 1.0)
    assert cone(np.array([-2.0, -0.5, 0.0, 0.5, 3.0])) == pytest.approx([-1.0, -0.5, 0.0, -0.5, -1.0])
    assert cone.kinks == (-1.0, 0.0, 1.0) and cone.infimum == -1.0
    assert InitialData.affine(2.0, 1.0)(3.0) == 7.0 and InitialData.affine(2.0).infimum == -math.inf
    bump = InitialData.bump(2.0, 0.5)
    y = np.linspace(-3, 3, 200_001)
    assert np.max(np.abs(np.gradient(bump(y), y))) == pytest.approx(bump.lipschitz_constant, rel=1e-6)
    assert cone.minimum_on(-0.3, 0.2) == -0.3
    with pytest.raises(ValueError):
        InitialData.cone(1.0, 0.0)


def test_energy_cutoff():
    assert homog.energy_cutoff(InitialData.affine(0.0, 3.0), FREE) == 0.0
    P = prototype_potential(A1, 2.0)
    vals = [homog.energy_cutoff(InitialData.affine(a), P) for a in (0.0, 0.5, 1.0, 2.0)]
    assert np.all(np.diff(vals) > 0)
    # fixed point of r = C sqrt(2 (r + S)) + S
    C, S = 1.5, P.sup_U
    r = homog.energy_cutoff(InitialData.affine(C), P)
    assert r == pytest.approx(C * math.sqrt(2 * (r + S)) + S, rel=1e-12)


def test_action_value_free_case():
    # constant speed sqrt(2r) over time t/eps from x/eps: action -r t + eps * 2 r t/eps + u0(end)
    u0 = InitialData.affine(0.7)
    r, x, t, eps = 0.5, 0.3, 1.0, 0.25
    for branch in (1, -1):
        end = x + branch * math.sqrt(2 * r) * t
        want = r * t + u0(end)
        assert homog.action_value(FREE, u0, r, branch, x, t, eps) == pytest.approx(want, rel=1e-9)
    with pytest.raises(ValueError):
        homog.action_value(FREE, u0, -0.1, 1, x, t, eps)


@pytest.mark.parametrize("a", [0.0, 0.6, -1.3])
def test_u_eps_free_affine(a):
    u0 = InitialData.affine(a, 0.2)
    for x, t, eps in ((0.0, 1.0, 0.5), (0.7, 0.5, 0.125), (-1.0, 2.0, 1.0)):
        res = homog.u_eps(FREE, u0, x, t, eps)
        assert res.u_eps == pytest.approx(a * x + 0.2 - 0.5 * a * a * t, abs=1e-6)


def test_u_eps_free_cone_vanishes_far_from_kinks():
    # with U = 0 and u0 = -min(|y|, 1), the Hopf-Lax value at |x| >= 1 equals -1
    u0 = InitialData.cone()
    for x in (1.0, -1.5, 2.0):
        assert homog.u_eps(FREE, u0, x, 1.0, 0.5).u_eps == pytest.approx(-1.0, abs=1e-8)
    # at x = 0 the best endpoint is y = +-1, cost 1/2 - 1
    assert homog.u_eps(FREE, u0, 0.0, 1.0, 0.5).u_eps == pytest.approx(-0.5, abs=1e-8)


@settings(max_examples=8, deadline=None)
@given(st.floats(-1.0, 1.0), st.sampled_from([1.0, 0.5, 0.25]))
def test_u_eps_bounds(x, eps):
    # L = q^2/2 + U >= 0 bounds u from below by inf u0, and resting at the start bounds it above
    u0 = InitialData.cone()
    t = 1.0
    val = homog.u_eps(P1, u0, x, t, eps).u_eps
    assert val >= u0.minimum_on(x - 10, x + 10) - 1e-9
    assert val <= u0(x) + t * P1.U(x / eps) + 1e-9


def test_u_eps_against_fd_oracle():
    u0 = InitialData.cone()
    eps = 1.0
    pts = np.array([-0.5, 0.0, 0.5])
    r0 = homog.energy_cutoff(u0, P1)
    dom = homog.dependence_interval(P1, pts, 1.0, eps, r0)
    vals = np.array([homog.u_eps(P1, u0, x, 1.0, eps).u_eps for x in pts])
    gaps = []
    for dx in (4e-3, 2e-3):
        sol = homog.fd_viscosity_solve(P1, u0, eps, dom, dx)
        gaps.append(np.max(np.abs(sol.at(pts) - vals)))
    assert gaps[1] < 1e-2 and gaps[1] < gaps[0]


def test_dip_next_to_the_start():
    # U has a local minimum 2e-3 to the left of s0, closer than the dip scan step; the optimal
    # path lingers there, and the FD solution converges to the same value from above
    u0 = InitialData.cone()
    x = 0.203125
    res = homog.u_eps(P1, u0, x, 1.0, 1.0)
    assert res.branch == "linger-turn"
    fd = [homog.fd_viscosity_solve(P1, u0, 1.0, (-6.0, 6.0), dx).at([x])[0] for dx in (1e-3, 5e-4)]
    assert fd[1] < fd[0] and res.u_eps == pytest.approx(fd[1], abs=1e-4)


def test_u_eps_validation():
    with pytest.raises(ValueError):
        homog.u_eps(P1, InitialData.cone(), 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        homog.u_eps(P1, InitialData.cone(), 0.0, 0.0, 0.5)


def test_u_hom_constant_and_affine(M1):
    assert homog.u_hom(M1, InitialData.affine(0.0), 0.3, 1.0) == pytest.approx(0.0, abs=1e-12)
    for a in (0.5 * M1.p0, M1.p0 + 0.8, -(M1.p0 + 1.5)):
        u0 = InitialData.affine(a, 0.1)
        for x in (-1.0, 0.4):
            want = a * x + 0.1 - 1.5 * effective.effective_H(M1, a)
            assert homog.u_hom(M1, u0, x, 1.5) == pytest.approx(want, abs=1e-7)


def test_u_hom_against_grid_hopf_lax(M1):
    # brute minimum over a fine y grid with Lbar evaluated pointwise by root finding
    u0 = InitialData.cone()
    t = 1.0
    for x in (0.0, 0.5, 1.2):
        y = np.linspace(x - 3.0, x + 3.0, 2401)
        q = np.abs(x - y) / t
        L = np.array([effective.effective_L(M1, v) for v in q])
        brute = float(np.min(t * L + u0(y)))
        got = homog.u_hom(M1, u0, x, t)
        assert got <= brute + 1e-12
        assert got == pytest.approx(brute, abs=1e-5)


def test_u_hom_free_cone():
    M = effective.build_model(FREE, mu_max=10.0)
    u0 = InitialData.cone()
    assert homog.u_hom(M, u0, 2.0, 1.0) == pytest.approx(-1.0, abs=1e-9)
    assert homog.u_hom(M, u0, 0.0, 1.0) == pytest.approx(-0.5, abs=1e-9)
    with pytest.raises(ValueError):
        homog.u_hom(M, u0, 0.0, 0.0)


def test_fd_free_affine_exact():
    u0 = InitialData.affine(0.8, -0.3)
    sol = homog.fd_viscosity_solve(FREE, u0, 1.0, (-3.0, 3.0), 1e-2, t=1.0)
    inner = np.abs(sol.x) <= 1.0
    assert np.max(np.abs(sol.u[inner] - (0.8 * sol.x[inner] - 0.3 - 0.32))) <= 1e-8


def test_fd_constant_potential():
    sol = homog.fd_viscosity_solve(constant_potential(2.0), InitialData.affine(0.0), 1.0, (-1.0, 1.0), 1e-2, t=0.7)
    assert np.max(np.abs(sol.u - 1.4)) <= 1e-6


def test_fd_rejects_bad_configuration():
    with pytest.raises(ConfigError):
        homog.fd_viscosity_solve(FREE, InitialData.cone(), 1.0, (-1, 1), 1e-2, cfl_factor=1.5)
    with pytest.raises(ConfigError):
        homog.fd_viscosity_solve(FREE, InitialData.cone(), 1.0, (-1, 1), 0.0)


def test_dependence_interval_free():
    lo, hi = homog.dependence_interval(FREE, [-0.5, 1.0], 2.0, 0.5, 2.0, margin=0.0)
    assert (lo, hi) == pytest.approx((-0.5 - 4.0, 1.0 + 4.0), rel=1e-9)
    assert homog.dependence_radius(FREE, 1.0, 2.0, 2.0) == pytest.approx(6.0)


def _anchor(a=3.0, zone=0.05, side=1):
    return homog._Anchor(side=side, index=0, x=10.0, U=0.0, a=a, gap=1.0, dist=1.0, zone=zone)


@pytest.mark.parametrize("c", [1e-3, 1e-8, 1e-40])
def test_well_turn_closed_form(c):
    a, zone = 3.0, 0.05
    w = homog._Well(_anchor(a, zone), homog.TURN, math.log(c))
    with mpmath.workdps(40):
        a_, c_ = mpmath.mpf(a), mpmath.mpf(c)
        dw = mpmath.sqrt(2 * c_ / a_)
        T = mpmath.quad(lambda d: 1 / mpmath.sqrt(a_ * d * d - 2 * c_), [dw, 2 * dw, zone])
        A = mpmath.quad(lambda d: mpmath.sqrt(a_ * d * d - 2 * c_), [dw, 2 * dw, zone])
    assert w.time == pytest.approx(float(T), rel=1e-10)
    assert w.action == pytest.approx(float(A), rel=1e-10)
    y0, J0 = w.locate(0.0)
    y1, J1 = w.locate(w.time)
    assert (y0, J0) == pytest.approx((10.0 - zone, 0.0), abs=1e-12)
    assert y1 == pytest.approx(10.0 - float(dw), abs=1e-12) and J1 == pytest.approx(w.action, rel=1e-12)


@pytest.mark.parametrize("c", [1e-3, 1e-8])
def test_well_pass_closed_form(c):
    a, zone = 3.0, 0.05
    w = homog._Well(_anchor(a, zone, side=-1), homog.PASS, math.log(c))
    T, _ = quad(lambda d: 1 / math.sqrt(a * d * d + 2 * c), -zone, zone, points=[0.0], epsrel=1e-12, limit=400)
    A, _ = quad(lambda d: math.sqrt(a * d * d + 2 * c), -zone, zone, epsrel=1e-12)
    assert w.time == pytest.approx(T, rel=1e-8)
    assert w.action == pytest.approx(A, rel=1e-8)
    assert w.locate(w.time)[0] == pytest.approx(10.0 - zone, abs=1e-12)
    # the midpoint of the crossing sits at the dip and carries half the action
    y, J = w.locate(0.5 * w.time)
    assert y == pytest.approx(10.0, abs=1e-12) and J == pytest.approx(0.5 * w.action, rel=1e-10)


def test_golden_section_and_vectorized():
    x, v = homog.golden_section(lambda z: (z - 0.3) ** 2 + 1.0, -1.0, 2.0)
    assert x == pytest.approx(0.3, abs=1e-6) and v == pytest.approx(1.0, abs=1e-12)
    lo, hi = np.array([0.0, -2.0]), np.array([2.0, 0.0])
    got = homog._golden_min_vectorized(lambda z: np.cos(z), lo + np.array([2.0, 2.0]), hi + np.array([3.0, 4.0]))
    assert got == pytest.approx([math.pi, math.pi], abs=1e-6)


def test_predicted_rates():
    assert homog.predicted_rates(6.0)["upper"] == pytest.approx(0.25)
    assert homog.predicted_rates(2.0)["upper_model"] == fitting.RECIPROCAL_LOG
    assert homog.predicted_rates(0.5)["lower"] == pytest.approx(1 / 3)
    assert homog.predicted_rates(None)["upper"] is None


def test_sweep_config_validation():
    u0 = InitialData.cone()
    with pytest.raises(ConfigError):
        homog.SweepConfig(P1, 1.0, u0, (0.5, 0.25, 0.125))
    with pytest.raises(ConfigError):
        homog.SweepConfig(P1, 1.0, u0, (0.5, 0.25, 0.125, 0.06, 0.03, 0.01))


def test_free_sweep_is_exact():
    M = effective.build_model(FREE, mu_max=10.0)
    cfg = homog.SweepConfig(FREE, None, InitialData.cone(), tuple(2.0 ** -np.arange(1, 7)))
    rep = homog.rate_sweep(cfg, M)
    assert np.max(rep.errors) <= 1e-8
    assert len(rep.rows) == 6 * len(cfg.points)
