"""The twelve acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary) and
then asserts the same outcome, so a miss is visible both ways.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from qphj import dynamics, effective, ergodic, fitting, homog
from qphj.torus import A1, Suspension, constant_potential, prototype_potential

XI = (1.0, np.sqrt(2.0))
POINTS = (-1.0, -0.5, 0.0, 0.5, 1.0)

pytestmark = pytest.mark.acceptance

_MODELS: dict = {}


def model(gamma: float) -> effective.EffectiveModel:
    if gamma not in _MODELS:
        _MODELS[gamma] = effective.build_model(prototype_potential(A1, gamma), mu_max=64.0)
    return _MODELS[gamma]


def test_free_hamiltonian_identity(record):
    t0 = time.perf_counter()
    P = constant_potential(0.0)
    M = effective.build_model(P, mu_max=64.0)
    u0 = homog.InitialData.cone()
    exact = {x: homog.u_hom(M, u0, x, 1.0) for x in POINTS}
    worst = 0.0
    for eps in 2.0 ** -np.arange(1, 7):
        for x in POINTS:
            r = homog.u_eps(P, u0, x, 1.0, eps)
            worst = max(worst, abs(r.u_eps - exact[x]))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and dt < 5.0
    assert record(1, ok, f"max |u_eps - u_hom| = {worst:.2e} (<= 1e-8), {dt:.1f} s (< 5 s)")


def test_effective_inversion(record):
    t0 = time.perf_counter()
    worst, shape_ok = 0.0, True
    for gamma in (1.0, 2.0, 6.0):
        M = model(gamma)
        p = np.linspace(M.p0 + 1e-3, M.p0 + 5.0, 50)
        H = effective.effective_H(M, p)
        phis = np.array([effective.phi(M, h) for h in H])
        worst = max(worst, float(np.max(np.abs(phis - p) / p)))
        q = np.linspace(-(M.p0 + 5.0), M.p0 + 5.0, 801)
        Hq = effective.effective_H(M, q)
        even = np.max(np.abs(Hq - Hq[::-1]))
        second = Hq[:-2] - 2.0 * Hq[1:-1] + Hq[2:]
        shape_ok &= bool(even <= 1e-12 * np.max(Hq) and np.min(second) >= -1e-10)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and shape_ok and dt < 120.0
    assert record(2, ok, f"max relative |phi(Hbar(p)) - p| = {worst:.2e} (<= 1e-6), even+convex={shape_ok}, "
                         f"{dt:.1f} s (< 120 s)")


def test_derivative_formula(record):
    t0 = time.perf_counter()
    worst = 0.0
    for gamma in (1.0, 6.0):
        M = model(gamma)
        for p in np.linspace(M.p0 + 0.1, M.p0 + 4.0, 20):
            h = 1e-4 * p
            fd = (effective.effective_H(M, p + h) - effective.effective_H(M, p - h)) / (2.0 * h)
            d = effective.effective_H_prime(M, p)
            worst = max(worst, abs(d - fd) / abs(fd))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and dt < 60.0
    assert record(3, ok, f"max relative |Hbar' - FD| = {worst:.2e} (<= 1e-3), {dt:.1f} s (< 60 s)")


def test_corrector_exactness(record):
    t0 = time.perf_counter()
    M = model(1.0)
    P = M.potential
    x = np.linspace(-37.3, 61.9, 1000)
    h = 1e-4
    worst = 0.0
    for p in (M.p0, M.p0 + 1.0):
        v = effective.corrector_values(M, p, np.concatenate([x - h, x + h]))
        dv = (v[1000:] - v[:1000]) / (2.0 * h)
        res = 0.5 * (p + dv) ** 2 + P(x) - effective.effective_H(M, p)
        worst = max(worst, float(np.max(np.abs(res))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 30.0
    assert record(4, ok, f"max cell-problem residual = {worst:.2e} (<= 1e-5), {dt:.1f} s (< 30 s)")


def test_corrector_growth(record):
    t0 = time.perf_counter()
    t = np.geomspace(1e2, 1e5, 8)
    M6 = model(6.0)
    env = effective.corrector_envelope(M6, M6.p0, t)
    growth = fitting.fit_power_law(t, env, decay=False, floor=0.0)
    bounded = bool(np.all(np.isfinite(env)) and growth.exponent < 0.1)
    fit1 = effective.corrector_growth_fit(model(1.0), model(1.0).p0, t)
    dt = time.perf_counter() - t0
    ok = bounded and fit1.exponent >= 0.30 and dt < 180.0
    assert record(5, ok, f"gamma=6 sup|v| = {env.max():.3g}, growth exponent {growth.exponent:.3f} (< 0.1); "
                         f"gamma=1 decay exponent {fit1.exponent:.3f} (>= 0.30); {dt:.1f} s (< 180 s)")


def test_birkhoff_bounded_rates(record):
    t0 = time.perf_counter()
    mode = ergodic.birkhoff_rate_experiment(lambda y: np.sin(2.0 * np.pi * y[..., 0]), XI, mean=0.0)
    F6, m6 = ergodic.sqrt_observable(Suspension.prototype_a1(6.0))
    r6 = ergodic.birkhoff_rate_experiment(F6, XI, mean=m6)
    F05, m05 = ergodic.sqrt_observable(Suspension.prototype_a1(0.5))
    r05 = ergodic.birkhoff_rate_experiment(F05, XI, mean=m05)
    dt = time.perf_counter() - t0
    a, b, c = mode.fit.exponent, r6.fit.exponent, r05.fit.exponent
    ok = abs(a - 1.0) <= 0.05 and b >= 0.8 and c >= 0.25 and dt < 180.0
    assert record(6, ok, f"single mode {a:.3f} (1 +- 0.05), sqrt U gamma=6 {b:.3f} (>= 0.8), "
                         f"gamma=0.5 {c:.3f} (>= 0.25); {dt:.1f} s (< 180 s)")


def test_unbounded_birkhoff(record):
    t0 = time.perf_counter()
    r2 = ergodic.unbounded_mean_experiment(prototype_potential(A1, 2.0))
    r1 = ergodic.unbounded_mean_experiment(prototype_potential(A1, 1.0))
    r6 = ergodic.unbounded_mean_experiment(prototype_potential(A1, 6.0))
    dt = time.perf_counter() - t0
    parts = [r2.fit.r_squared >= 0.9, r1.fit.exponent >= 0.10, 0.15 <= r6.fit.exponent <= 0.45]
    ok = all(parts) and dt < 300.0
    assert record(7, ok, f"gamma=2 log-law r2 {r2.fit.r_squared:.3f} (>= 0.9); gamma=1 decay {r1.fit.exponent:.3f} "
                         f"(>= 0.10); gamma=6 growth {r6.fit.exponent:.3f} (in [0.15, 0.45]); {dt:.1f} s (< 300 s)")


def test_characteristic_averages(record):
    t0 = time.perf_counter()
    fit6 = dynamics.critical_velocity_rate(model(6.0))
    M2 = model(2.0)
    t = dynamics.DEFAULT_T_GRID
    err2 = dynamics.velocity_errors(M2, M2.p0, t)
    fit2 = fitting.fit_reciprocal_log(t, err2)
    dt = time.perf_counter() - t0
    ok = 0.18 <= fit6.exponent <= 0.45 and fit2.r_squared >= 0.85 and dt < 180.0
    assert record(8, ok, f"gamma=6 exponent {fit6.exponent:.3f} (in [0.18, 0.45]); gamma=2 1/log t r2 "
                         f"{fit2.r_squared:.3f} (>= 0.85); {dt:.1f} s (< 180 s)")


def test_homogenization_sweep(record):
    t0 = time.perf_counter()
    eps = tuple(2.0 ** -np.arange(3, 11))
    u0 = homog.InitialData.cone()
    rep6 = homog.rate_sweep(homog.SweepConfig(prototype_potential(A1, 6.0), 6.0, u0, eps), model(6.0))
    rep2 = homog.rate_sweep(homog.SweepConfig(prototype_potential(A1, 2.0), 2.0, u0, eps), model(2.0))
    dt = time.perf_counter() - t0
    e6 = rep6.errors
    monotone = bool(np.all(e6[1:] <= 1.1 * e6[:-1]))
    ok = monotone and rep6.fit.exponent >= 0.20 and rep2.log_fit.r_squared >= 0.8 and dt < 600.0
    assert record(9, ok, f"gamma=6 e(eps) = {np.array2string(e6, precision=3)}, nonincreasing within 10%: {monotone}, "
                         f"exponent {rep6.fit.exponent:.3f} (>= 0.20); gamma=2 1/|log eps| r2 "
                         f"{rep2.log_fit.r_squared:.3f} (>= 0.8); {dt:.1f} s (< 600 s)")


def test_fd_oracle_agreement(record):
    t0 = time.perf_counter()
    P = prototype_potential(A1, 6.0)
    u0 = homog.InitialData.cone()
    eps = 0.25
    pts = np.array(POINTS)
    ue = np.array([homog.u_eps(P, u0, x, 1.0, eps).u_eps for x in pts])
    dom = homog.dependence_interval(P, pts, 1.0, eps, 0.5 * u0.lipschitz_constant ** 2)
    gaps = []
    for dx in (1e-3, 5e-4):
        sol = homog.fd_viscosity_solve(P, u0, eps, dom, dx)
        gaps.append(float(np.max(np.abs(sol.at(pts) - ue))))
    dt = time.perf_counter() - t0
    ratio = gaps[1] / gaps[0]
    ok = gaps[0] <= 2e-2 and ratio <= 0.6 and dt < 600.0
    assert record(10, ok, f"gap at dx=1e-3 {gaps[0]:.3e} (<= 2e-2), refinement ratio {ratio:.3f} (<= 0.6); "
                          f"{dt:.1f} s (< 600 s)")


def test_inclusion_length(record):
    t0 = time.perf_counter()
    f = lambda y: np.sin(2.0 * np.pi * y[..., 0]) + np.sin(2.0 * np.pi * y[..., 1])
    fit = ergodic.inclusion_length_fit(f, [0.2, 0.1, 0.05, 0.025, 0.0125], XI)
    dt = time.perf_counter() - t0
    ok = 0.8 <= fit.exponent <= 1.3 and dt < 120.0
    assert record(11, ok, f"slope of l_eps vs 1/eps {fit.exponent:.3f} (in [0.8, 1.3]); {dt:.1f} s (< 120 s)")


def test_divergence_dichotomy(record):
    t0 = time.perf_counter()
    found = {g: ergodic.inverse_sqrt_mean(Suspension.prototype_a1(g)) for g in (0.5, 1.0, 1.5, 2.0, 3.0)}
    dt = time.perf_counter() - t0
    ok = all(not found[g][1] and np.isfinite(found[g][0]) for g in (0.5, 1.0, 1.5))
    ok = ok and all(found[g][1] for g in (2.0, 3.0)) and dt < 60.0
    desc = ", ".join(f"{g:g}: {'divergent' if d else f'{v:.4f}'}" for g, (v, d) in found.items())
    assert record(12, ok, f"{desc}; {dt:.1f} s (< 60 s)")
