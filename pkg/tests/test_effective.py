from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sint
from scipy import optimize
from scipy.special import roots_legendre

from qphj import effective
from qphj.errors import OutOfTableError
from qphj.quad import suspension_offset_values
from qphj.torus import A1, Suspension, constant_potential, prototype_potential


@pytest.fixture(scope="module")
def M1():
    return effective.build_model(prototype_potential(A1, 1.0))


@pytest.fixture(scope="module")
def M_free():
    return effective.build_model(constant_potential(0.0), mu_max=10.0)


def gl_oracle(gamma, transform, n=4096, block=256):
    """Dense tensor Gauss-Legendre rule over the unit cell centred at the A1 minimizer."""
    x, w = roots_legendre(n)
    x, w = 0.5 * x, 0.5 * w
    U = Suspension.prototype_a1(gamma)
    total = 0.0
    for i in range(0, n, block):
        H = np.stack(np.meshgrid(x[i:i + block], x, indexing="ij"), axis=-1)
        total += float(w[i:i + block] @ transform(suspension_offset_values(U, H)) @ w)
    return total


def test_trivial_p0():
    assert effective.compute_p0(constant_potential(0.0)) == 0.0
    assert effective.compute_p0(constant_potential(2.0)) == pytest.approx(2.0, abs=1e-12)


def test_p0_and_phi_against_tensor_oracle(M1):
    p0 = gl_oracle(1.0, lambda u: np.sqrt(2 * u))
    assert effective.compute_p0(M1.potential) == pytest.approx(p0, rel=1e-6)
    assert M1.p0 == pytest.approx(p0, rel=1e-6)
    phi1 = gl_oracle(1.0, lambda u: np.sqrt(2 * (1.0 + u)), n=1024)
    assert effective.phi(M1, 1.0) == pytest.approx(phi1, rel=1e-6)


def test_effective_H_against_bisection_oracle(M1):
    target = M1.p0 + 1.0
    g = lambda mu: gl_oracle(1.0, lambda u: np.sqrt(2 * (mu + u)), n=512) - target
    mu = optimize.bisect(g, 0.0, 5.0, xtol=1e-12)
    assert effective.effective_H(M1, target) == pytest.approx(mu, abs=1e-8)


def test_free_hamiltonian(M_free):
    assert M_free.p0 == 0.0
    for mu in (0.0, 0.3, 7.0):
        assert effective.phi(M_free, mu) == pytest.approx(math.sqrt(2 * mu), rel=1e-12)
    for p in (0.1, 1.0, -3.0):
        assert effective.effective_H(M_free, p) == pytest.approx(0.5 * p * p, rel=1e-12)
        assert effective.effective_H_prime(M_free, p) == pytest.approx(p, rel=1e-12)
        assert effective.effective_H_second(M_free, p) == pytest.approx(1.0, rel=1e-10)
    for q in (0.0, 0.5, 2.0):
        assert effective.effective_L(M_free, q) == pytest.approx(0.5 * q * q, rel=1e-10, abs=1e-15)
    assert np.all(effective.corrector_values(M_free, 1.0, np.linspace(-50, 50, 11)) == pytest.approx(0.0, abs=1e-10))
    fit = effective.corrector_growth_fit(M_free, 1.0, np.geomspace(10, 1e4, 6))
    assert fit.flag == "flat"


def test_table_invariants(M1):
    assert M1.phi_table[0] == M1.p0
    assert np.all(np.diff(M1.phi_table) >= 0) and M1.phi_table[-1] > M1.phi_table[0]
    assert effective.effective_H(M1, M1.p0) == 0.0
    assert effective.effective_H(M1, 0.5 * M1.p0) == 0.0
    with pytest.raises(OutOfTableError):
        effective.phi(M1, 2 * M1.mu_max)
    with pytest.raises(OutOfTableError):
        effective.effective_H(M1, 2 * M1.p_max)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 4.8))
def test_even(M1, p):
    assert effective.effective_H(M1, p) == effective.effective_H(M1, -p)


def test_inversion_consistency(M1):
    p = np.linspace(M1.p0 + 1e-3, M1.p_max, 50)
    H = effective.effective_H(M1, p)
    back = np.array([effective.phi(M1, h) for h in H])
    assert np.max(np.abs(back - p) / p) <= 1e-6


def test_convex_on_random_triples(M1):
    rng = np.random.default_rng(3)
    trip = np.sort(rng.uniform(-M1.p_max, M1.p_max, size=(200, 3)), axis=1)
    H = effective.effective_H(M1, trip)
    lam = (trip[:, 2] - trip[:, 1]) / (trip[:, 2] - trip[:, 0])
    assert np.all(H[:, 1] <= lam * H[:, 0] + (1 - lam) * H[:, 2] + 1e-8)


def test_derivatives_match_finite_differences(M1):
    p = M1.p0 + 0.5
    h = 1e-4
    H = lambda q: effective.effective_H(M1, q)
    fd1 = (H(p + h) - H(p - h)) / (2 * h)
    assert effective.effective_H_prime(M1, p) == pytest.approx(fd1, rel=1e-3)
    assert effective.effective_H_prime(M1, -p) == pytest.approx(-fd1, rel=1e-3)
    h2 = 1e-3
    fd2 = (H(p + h2) - 2 * H(p) + H(p - h2)) / h2**2
    assert effective.effective_H_second(M1, p) == pytest.approx(fd2, rel=1e-2)
    with pytest.raises(ValueError):
        effective.effective_H_second(M1, M1.p0)


def test_boundary_slope_dichotomy(M1):
    M2 = effective.build_model(prototype_potential(A1, 2.0))
    assert M2.prime_at_p0 == 0.0
    assert effective.effective_H_prime(M2, M2.p0) == 0.0
    assert M1.prime_at_p0 > 0.0
    assert effective.effective_H_prime(M1, M1.p0) == M1.prime_at_p0


def test_lagrangian_against_grid_supremum(M1):
    p = np.linspace(-M1.p_max, M1.p_max, 100_001)
    H = effective.effective_H(M1, p)
    for q in (0.3, 0.5 * M1.prime_at_p0, 1.5):
        want = float(np.max(p * q - H))
        assert effective.effective_L(M1, q) == pytest.approx(want, abs=1e-5)
    assert effective.effective_L(M1, 0.0) == 0.0
    # on the flat-gradient gap the supremum is attained at p0
    q = 0.5 * M1.prime_at_p0
    assert effective.effective_L(M1, q) == pytest.approx(M1.p0 * q, rel=1e-14)


def test_fenchel_young(M1):
    p = np.linspace(-M1.p_max, M1.p_max, 100)
    q = np.linspace(-3, 3, 100)
    H = effective.effective_H(M1, p)
    L = np.array([effective.effective_L(M1, v) for v in q])
    slack = L[None, :] + H[:, None] - p[:, None] * q[None, :]
    assert slack.min() >= -1e-6


def test_corrector_simpson_oracle(M1):
    P = M1.potential
    x = np.linspace(0.0, 100.0, 1_000_001)
    w = sint.simpson(np.sqrt(2.0 * P.U(x)), x=x)
    assert effective.corrector_value(M1, M1.p0, 100.0) == pytest.approx(w - M1.p0 * 100.0, abs=1e-6)
    assert effective.corrector_value(M1, M1.p0 + 0.7, 0.0) == 0.0
    with pytest.raises(ValueError):
        effective.corrector_value(M1, 0.5 * M1.p0, 1.0)


def test_corrector_cell_residual(M1):
    x = np.linspace(-20.0, 30.0, 1000)
    h = 1e-4
    for p in (M1.p0, -(M1.p0 + 1.0)):
        v = effective.corrector_values(M1, p, np.concatenate([x - h, x + h]))
        dv = (v[1000:] - v[:1000]) / (2 * h)
        res = 0.5 * (p + dv) ** 2 - M1.potential.U(x) - effective.effective_H(M1, p)
        assert np.max(np.abs(res)) <= 1e-5


def test_corrector_sublinear(M1):
    t = 10.0 ** np.arange(1, 6)
    ratio = np.abs(effective.corrector_values(M1, M1.p0, t)) / t
    assert ratio[-1] < ratio[0]
    assert np.all(ratio[1:] <= 1.2 * ratio[:-1] + 1e-12)
    with pytest.raises(ValueError):
        effective.corrector_growth_fit(M1, M1.p0, [1, 2, 3])


def test_regularity_reports(M1):
    M6 = effective.build_model(prototype_potential(A1, 6.0))
    rep = effective.regularity_report(M6)
    assert rep.predicted_holder_beta == pytest.approx(1 / 3)
    assert rep.asymptotic_fit.exponent == pytest.approx(1 / 3, abs=0.05)
    rep1 = effective.regularity_report(M1)
    assert rep1.measured_prime_at_p0 > 0
    rep2 = effective.regularity_report(effective.build_model(prototype_potential(A1, 2.0)))
    assert rep2.predicted_holder_beta == "log" and rep2.asymptotic_fit.model == "reciprocal-log"
    assert effective.holder_beta(1.0) == pytest.approx(0.5)
    assert effective.holder_beta(0.5) == 1.0


def test_save_load_roundtrip(tmp_path, M1):
    path = tmp_path / "m.csv"
    effective.save_model(M1, path)
    M = effective.load_model(path, M1.potential)
    assert M.p0 == M1.p0 and np.array_equal(M.phi_table, M1.phi_table)
    assert effective.effective_H(M, M1.p0 + 1.3) == effective.effective_H(M1, M1.p0 + 1.3)
    with pytest.raises(ValueError):
        effective.load_model(path, prototype_potential(A1, 2.0))
