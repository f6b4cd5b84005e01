from __future__ import annotations

import math

import numba
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from qphj import dynamics, effective
from qphj.errors import StationaryError
from qphj.torus import A1, A2, constant_potential, prototype_potential

P1 = prototype_potential(A1, 1.0)


def test_constant_speed_and_zero_time():
    c = dynamics.Characteristic(constant_potential(2.0), 0.0, 1, 0.0)
    assert dynamics.characteristic_endpoint(c, 3.0) == pytest.approx(6.0, rel=1e-12)
    assert dynamics.characteristic_endpoint(dynamics.Characteristic(P1, 0.3, -1, 4.5), 0.0) == 4.5
    back = dynamics.Characteristic(constant_potential(2.0), 0.0, -1, 1.0)
    assert dynamics.characteristic_endpoint(back, 3.0) == pytest.approx(-5.0, rel=1e-12)


def test_stationary_and_negative_energy():
    with pytest.raises(StationaryError):
        dynamics.characteristic_endpoint(dynamics.Characteristic(prototype_potential(A2, 2.0), 0.0, 1, 0.0), 1.0)
    with pytest.raises(ValueError):
        dynamics.characteristic_endpoint(dynamics.Characteristic(P1, -0.1, 1, 0.0), 1.0)
    with pytest.raises(ValueError):
        dynamics.Characteristic(P1, 0.1, 0, 0.0)


@numba.njit(cache=True)
def _rk4_a1(r, x, s_end, h):
    # explicit RK4 for x' = sqrt(2 (r + U(xi x))) with U = 2 - sin 2 pi x - sin 2 pi sqrt2 x
    def speed(y):
        u = 2.0 - math.sin(2 * math.pi * y) - math.sin(2 * math.pi * math.sqrt(2.0) * y)
        return math.sqrt(2.0 * (r + u))

    n = int(round(s_end / h))
    for _ in range(n):
        k1 = speed(x)
        k2 = speed(x + 0.5 * h * k1)
        k3 = speed(x + 0.5 * h * k2)
        k4 = speed(x + h * k3)
        x += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return x


def test_endpoint_against_ode_oracle():
    r = 1.0
    want = _rk4_a1(r, 0.0, 100.0, 1e-4)
    got = dynamics.characteristic_endpoint(dynamics.Characteristic(P1, r, 1, 0.0), 100.0)
    assert got == pytest.approx(want, rel=1e-4)


def test_zero_energy_a2_blocked_by_equilibrium():
    # from x0 = -1 moving right at r = 0 the orbit approaches the equilibrium at 0 but never crosses
    P = prototype_potential(A2, 1.0)
    y = dynamics.characteristic_endpoint(dynamics.Characteristic(P, 0.0, 1, -1.0), 50.0)
    assert -1.0 < y <= 0.0


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(0.5, 20.0), st.floats(0.5, 20.0), st.sampled_from([1, -1]))
def test_semigroup(r, s, u, branch):
    c = dynamics.Characteristic(P1, r, branch, 0.3)
    mid = dynamics.characteristic_endpoint(c, s)
    direct = dynamics.characteristic_endpoint(c, s + u)
    restart = dynamics.characteristic_endpoint(dynamics.Characteristic(P1, r, branch, mid), u)
    assert direct == pytest.approx(restart, abs=1e-6)


def test_monotone_energy_and_speed_bound():
    r = 0.2
    times = np.linspace(0.0, 40.0, 81)
    eta = dynamics.walk(P1, r, 1, 0.0, times)
    assert np.all(np.diff(eta) > 0)
    bound = np.sqrt(2.0 * (r + P1.sup_U))
    assert np.all(np.abs(eta[1:]) / times[1:] <= bound)
    # energy: five-point finite-difference speed matches sqrt(2 (r - V)) at sampled points
    h = 1e-3
    s = times[2:-2]
    e = [dynamics.walk(P1, r, 1, 0.0, s + k * h) for k in (-2, -1, 1, 2)]
    speed = (e[0] - 8 * e[1] + 8 * e[2] - e[3]) / (12 * h)
    energy = 0.5 * speed**2 - P1.U(eta[2:-2])
    assert np.max(np.abs(energy - r)) <= 1e-6
    # time of flight to eta(s) recomputed with an independent quadrature
    for si, y in zip(times[::20][1:], eta[::20][1:]):
        T, _ = quad(lambda x: (2.0 * (r + P1.U(x))) ** -0.5, 0.0, y, limit=2000, epsabs=1e-12, epsrel=1e-12)
        assert T == pytest.approx(si, rel=1e-8)


def test_orbit_rule_matches_walk():
    r = 0.05
    rule = dynamics.OrbitRule(P1, 2.0, -1, dynamics.representative_energies(0.01, 1.0))
    u, J = rule.locate(r, 25.0)
    y = dynamics.walk(P1, r, -1, 2.0, [25.0])[0]
    assert 2.0 - u == pytest.approx(y, abs=1e-8)
    y2, J2 = dynamics.endpoint_and_action(P1, r, -1, 2.0, 25.0)
    assert (y2, J2) == pytest.approx((y, J), rel=1e-9)


def test_representative_energies():
    e = dynamics.representative_energies(0.0, 1.0)
    assert e[0] == 0.0 and e[-1] == pytest.approx(1.0) and np.all(np.diff(e) > 0)
    assert np.all(e[2:] / e[1:-1] <= 16.0 + 1e-9)


def test_flat_velocity_fit_for_free_case():
    M = effective.build_model(constant_potential(0.0), mu_max=4.0)
    fit = dynamics.velocity_average_rate(M, 1.0, np.geomspace(10, 1e3, 6))
    assert fit.flag == "flat"


def test_critical_exponents():
    assert dynamics.critical_exponent(6.0) == pytest.approx(4.0 / 13.0)
    assert dynamics.critical_exponent(3.0) == pytest.approx(7.0 / 43.0)
    # increasing in gamma, so gamma = 2.5 falls below the gamma = 3 value
    g = np.linspace(2.01, 20, 200)
    assert np.all(np.diff(dynamics.critical_exponent(g)) > 0)
    assert 0 < dynamics.critical_exponent(2.5) < 7.0 / 43.0
    assert dynamics.plain_critical_exponent(6.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        dynamics.critical_velocity_rate(effective.build_model(constant_potential(0.0), mu_max=4.0))
