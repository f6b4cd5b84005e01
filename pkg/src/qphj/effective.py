"""Effective Hamiltonian, its derivatives, the effective Lagrangian and exact correctors.

For H(x, p) = p^2/2 + V(x) with V(x) = -U(xi x) the effective Hamiltonian is
recovered from the monotone map

    phi(mu) = int_T sqrt(2 (mu + U)),          mu >= 0,

as Hbar(p) = 0 for |p| <= p0 = phi(0) and Hbar(p) = phi^{-1}(|p|) otherwise.
Differentiating the inverse gives

    Hbar'(p)  = 1 / int (2 (mu + U))^{-1/2},
    Hbar''(p) = Hbar'(p)^3 int (2 (mu + U))^{-3/2},      mu = Hbar(p).

All torus integrals are evaluated with a polar cubature rule frozen once per
model: the adaptive mesh is refined until a family of representative integrands
(the three moments above at geometrically spaced mu) meets tolerance, and the
values of U at its nodes are cached.  Queries at any mu in [0, mu_max] are then
dot products.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import fitting
from .errors import DivergenceSuspectedError, OutOfTableError
from .fitting import RateFit
from .quad import (DEFAULT_SPEC, PolarRule, QuadratureSpec, build_polar_rule, orbit_cumulative_sqrt,
                   suspension_integrand, suspension_offset_values, torus_integral)
from .torus import A1, A2, Potential

TABLE_SIZE = 60
CSV_VERSION = "qphj-effective-model/1"


def compute_p0(P: Potential, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """p0 = int_T sqrt(2 U) by adaptive polar quadrature."""
    f = suspension_integrand(P.suspension, lambda u: np.sqrt(2.0 * u))
    return float(torus_integral(f, spec, detect_divergence=False))


def boundary_slope(P: Potential, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """One-sided derivative Hbar'_+(p0): 0 when int U^{-1/2} diverges, else its reciprocal (times sqrt 2)."""
    U = P.suspension
    if U.min_value > 0:
        # bounded integrand, no singularity at the minimizer
        f = suspension_integrand(U, lambda u: 1.0 / np.sqrt(2.0 * u))
        return 1.0 / float(torus_integral(f, spec, detect_divergence=False))
    if P.is_constant:
        return 0.0
    f = suspension_integrand(U, lambda u: 1.0 / np.sqrt(2.0 * u))
    try:
        val = float(torus_integral(f, spec, detect_divergence=True))
    except DivergenceSuspectedError:
        return 0.0
    return 1.0 / val if np.isfinite(val) and val > 0 else 0.0


def mu_grid(mu_max: float, size: int = TABLE_SIZE) -> np.ndarray:
    """{0} together with mu_max * 2^-k, sorted increasingly."""
    k = np.arange(size - 2, -1, -1, dtype=float)
    return np.concatenate([[0.0], mu_max * 2.0**-k])


def _rule_family(mu_max: float, size: int):
    reps = mu_max * 2.0 ** -np.arange(0, size - 1, 4, dtype=float)
    reps = np.concatenate([reps, [mu_max * 2.0 ** -(size - 2)]])

    def family(u):
        base = reps[:, None] + u[None, :]
        return np.concatenate([
            np.sqrt(u)[None, :],
            np.sqrt(base),
            base**-0.5,
            base**-1.5,
        ])
    return family


@dataclass(frozen=True, eq=False)
class EffectiveModel:
    potential: Potential
    p0: float
    mu_table: np.ndarray
    phi_table: np.ndarray
    mu_max: float
    quad_spec: QuadratureSpec
    rule: PolarRule
    u_nodes: np.ndarray
    prime_at_p0: float
    dphi_table: np.ndarray = field(repr=False)

    # -- raw torus moments on the frozen rule --------------------------------
    def _nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Rule nodes with equal values of U merged (a constant U collapses to one node)."""
        merged = self.__dict__.get("_merged")
        if merged is None:
            values, inverse = np.unique(self.u_nodes, return_inverse=True)
            merged = (values, np.bincount(inverse, weights=self.rule.weights))
            object.__setattr__(self, "_merged", merged)
        return merged

    def _moment(self, mu, power: float) -> np.ndarray:
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        out = np.empty(len(mu))
        u_nodes, weights = self._nodes()
        for i in range(0, len(mu), 16):
            base = 2.0 * (mu[i:i + 16, None] + u_nodes[None, :])
            root = np.sqrt(base)
            if power == 0.5:
                vals = root
            elif power == -0.5:
                vals = 1.0 / root
            elif power == -1.5:
                vals = 1.0 / (base * root)
            else:
                vals = base**power
            out[i:i + 16] = vals @ weights
        return out

    def phi_values(self, mu) -> np.ndarray:
        return self._moment(mu, 0.5)

    def dphi_values(self, mu) -> np.ndarray:
        return self._moment(mu, -0.5)

    def d2phi_values(self, mu) -> np.ndarray:
        return -self._moment(mu, -1.5)

    @property
    def p_max(self) -> float:
        return float(self.phi_table[-1])

    @property
    def q_max(self) -> float:
        return float(1.0 / self.dphi_table[-1])

    def key(self) -> str:
        return model_key(self.potential, self.quad_spec, self.mu_max, len(self.mu_table))


def model_key(P: Potential, spec: QuadratureSpec, mu_max: float, size: int) -> str:
    text = repr((P.suspension.kind, P.suspension.gamma, P.suspension.coefficients,
                 P.frequency.components, spec, float(mu_max), int(size)))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_model(P: Potential, mu_max: float = 10.0, spec: QuadratureSpec = DEFAULT_SPEC,
                size: int = TABLE_SIZE) -> EffectiveModel:
    """Freeze the cubature rule, tabulate phi and compute p0 and Hbar'_+(p0)."""
    U = P.suspension
    family = _rule_family(mu_max, size)
    f = suspension_integrand(U, family)
    rule = build_polar_rule(f, U.minimizer, spec)
    u_nodes = suspension_offset_values(U, rule.offsets)
    prime = boundary_slope(P, spec)
    return _assemble(P, mu_max, spec, size, rule, u_nodes, prime)


def _assemble(P, mu_max, spec, size, rule, u_nodes, prime) -> EffectiveModel:
    mus = mu_grid(mu_max, size)
    stub = EffectiveModel(P, 0.0, mus, np.zeros(size), mu_max, spec, rule, u_nodes, prime,
                          np.zeros(size))
    phis = stub.phi_values(mus)
    with np.errstate(divide="ignore"):
        dphis = np.concatenate([[np.inf if prime == 0 else 1.0 / prime], stub.dphi_values(mus[1:])])
    p0 = float(phis[0])
    return EffectiveModel(P, p0, mus, phis, mu_max, spec, rule, u_nodes, prime, dphis)


def phi(M: EffectiveModel, mu: float) -> float:
    """phi(mu) = int sqrt(2 (mu + U)) for 0 <= mu <= mu_max."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if mu > M.mu_max:
        raise OutOfTableError(f"mu = {mu} exceeds mu_max = {M.mu_max}")
    return float(M.phi_values(mu)[0])


def _mu_of_p(M: EffectiveModel, p: float) -> float:
    a = abs(float(p))
    if a <= M.p0:
        return 0.0
    if a > M.p_max:
        raise OutOfTableError(f"|p| = {a} exceeds phi(mu_max) = {M.p_max}")
    k = int(np.searchsorted(M.phi_table, a))
    lo, hi = M.mu_table[k - 1], M.mu_table[k]
    g = lambda mu: float(M.phi_values(mu)[0]) - a
    glo, ghi = g(lo), g(hi)
    if glo >= 0:
        return float(lo)
    if ghi <= 0:
        return float(hi)
    return float(optimize.brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def effective_H(M: EffectiveModel, p) -> float | np.ndarray:
    """Hbar(p): 0 on [-p0, p0], the inverse of phi outside; even in p."""
    if np.ndim(p):
        return np.array([_mu_of_p(M, float(q)) for q in np.ravel(p)]).reshape(np.shape(p))
    return _mu_of_p(M, float(p))


def effective_H_prime(M: EffectiveModel, p) -> float:
    """Hbar'(p) = sign(p) / int (2 (mu + U))^{-1/2}; the one-sided limit at |p| = p0."""
    p = float(p)
    a = abs(p)
    if a < M.p0:
        return 0.0
    mu = _mu_of_p(M, p)
    if mu == 0.0:
        return float(np.sign(p) * M.prime_at_p0)
    return float(np.sign(p) / M.dphi_values(mu)[0])


def effective_H_second(M: EffectiveModel, p) -> float:
    """Hbar''(p) = Hbar'(p)^3 int (2 (mu + U))^{-3/2} for |p| > p0."""
    p = float(p)
    if abs(p) <= M.p0:
        raise ValueError("the second derivative is evaluated only for |p| > p0")
    mu = _mu_of_p(M, p)
    if mu == 0.0:
        raise ValueError("p is numerically indistinguishable from p0")
    d1 = 1.0 / M.dphi_values(mu)[0]
    return float(d1**3 * (-M.d2phi_values(mu)[0]))


def _mu_of_slope(M: EffectiveModel, q: float) -> float:
    """mu with Hbar'(phi(mu)) = q, i.e. phi'(mu) = 1/q (phi' is decreasing)."""
    target = 1.0 / q
    d = M.dphi_table
    if target < d[-1]:
        raise OutOfTableError(f"slope {q} exceeds the tabulated gradient range {M.q_max}")
    if target >= d[1]:
        # the solution lies below the smallest positive table entry
        lo, hi = 0.0, M.mu_table[1]
        if not np.isfinite(d[0]) or target < d[0]:
            g = lambda mu: float(M.dphi_values(mu)[0]) - target
            # phi' may blow up at 0; walk down geometrically to a sign change
            lo = hi
            for _ in range(200):
                lo *= 1e-2
                if g(lo) > 0 or lo < 1e-300:
                    break
            if g(lo) <= 0:
                return 0.0
            return float(optimize.brentq(g, lo, hi, xtol=1e-300, rtol=1e-14))
        return 0.0
    k = int(np.searchsorted(-d[1:], -target)) + 1
    lo, hi = M.mu_table[k - 1], M.mu_table[k]
    return _decreasing_root(M, target, lo, hi)


def _decreasing_root(M: EffectiveModel, target: float, lo: float, hi: float) -> float:
    """Root of phi'(mu) = target on [lo, hi] by Newton steps safeguarded with bisection."""
    glo = float(M.dphi_values(lo)[0]) - target
    ghi = float(M.dphi_values(hi)[0]) - target
    if glo <= 0:
        return float(lo)
    if ghi >= 0:
        return float(hi)
    mu = 0.5 * (lo + hi)
    for _ in range(200):
        g = float(M.dphi_values(mu)[0]) - target
        if g == 0:
            return float(mu)
        if g > 0:
            lo = mu
        else:
            hi = mu
        slope = float(M.d2phi_values(mu)[0])
        step = mu - g / slope if slope < 0 else 0.5 * (lo + hi)
        if not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if abs(step - mu) <= 4 * np.finfo(float).eps * mu or hi - lo <= 4 * np.finfo(float).eps * hi:
            return float(step)
        mu = step
    return float(mu)


def effective_L(M: EffectiveModel, q) -> float:
    """Lbar(q) = sup_p (p q - Hbar(p)).

    On the gap |q| < Hbar'_+(p0) the supremum sits at p0 and Lbar = p0 |q|;
    beyond it the maximizer p* = phi(mu) solves Hbar'(p*) = |q| and
    Lbar = phi(mu) |q| - mu.
    """
    q = abs(float(q))
    if q == 0.0:
        return 0.0
    if q <= M.prime_at_p0:
        return M.p0 * q
    mu = _mu_of_slope(M, q)
    return float(M.phi_values(mu)[0] * q - mu)


def corrector_values(M: EffectiveModel, p: float, x) -> np.ndarray:
    """v_p(x) = sign(p) int_0^x sqrt(2 (mu + U(xi s))) ds - p x, mu = Hbar(p)."""
    p = float(p)
    if abs(p) < M.p0:
        raise ValueError("exact correctors exist for |p| >= p0")
    mu = _mu_of_p(M, p)
    x = np.asarray(x, dtype=float)
    w = orbit_cumulative_sqrt(M.potential, mu, x, M.quad_spec)
    return np.sign(p) * w - p * x


def corrector_value(M: EffectiveModel, p: float, x: float) -> float:
    return float(corrector_values(M, p, np.array([x]))[0])


def corrector_envelope(M: EffectiveModel, p: float, t_grid, samples: int = 400) -> np.ndarray:
    """sup over s in [t/2, t] of |v_p(s)| for each t of the grid."""
    t_grid = np.asarray(t_grid, dtype=float)
    pts = np.concatenate([np.linspace(0.5 * t, t, samples) for t in t_grid])
    vals = np.abs(corrector_values(M, p, pts)).reshape(len(t_grid), samples)
    return vals.max(axis=1)


def corrector_growth_fit(M: EffectiveModel, p: float, t_grid) -> RateFit:
    """Decay exponent of |v_p(t)/t| fitted on window envelopes sup_{[t/2, t]} |v_p|."""
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) < 6 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing with at least 6 points")
    env = corrector_envelope(M, p, t_grid)
    return fitting.fit_power_law(t_grid, env / t_grid, decay=True, floor=1e-12)


@dataclass(frozen=True)
class RegularityReport:
    gamma: float
    predicted_holder_beta: float | str
    measured_prime_at_p0: float
    asymptotic_fit: RateFit
    predicted_slope: float | None = None


def holder_beta(gamma: float) -> float | str:
    if gamma > 2:
        return 0.5 - 1.0 / gamma
    if gamma == 2:
        return "log"
    if gamma > 2.0 / 3.0:
        return 1.0 / gamma - 0.5
    return 1.0


def regularity_report(M: EffectiveModel, gamma: float | None = None, width: float = 0.5,
                      points: int = 24) -> RegularityReport:
    """Fit Hbar'(p) against Hbar(p) for p in (p0, p0 + width].

    For gamma > 2 the two-sided bounds give Hbar' ~ Hbar^(1/2 - 1/gamma); for
    gamma = 2 the fit is against 1/|log Hbar|; below 2 the derivative tends to
    the positive constant Hbar'_+(p0).
    """
    U = M.potential.suspension
    if U.kind not in (A1, A2):
        raise ValueError("regularity reports are defined for prototype suspensions")
    gamma = U.gamma if gamma is None else gamma
    mu_top = effective_H(M, M.p0 + width)
    mus = mu_top * np.geomspace(1e-12, 1.0, points)
    mus = mus[mus >= M.mu_table[1]]
    slopes = 1.0 / M.dphi_values(mus)
    if gamma == 2:
        fit = fitting.fit_reciprocal_log(mus, slopes)
        predicted = None
    else:
        fit = fitting.fit_power_law(mus, slopes, decay=False, floor=0.0)
        predicted = 0.5 - 1.0 / gamma if gamma > 2 else 0.0
    return RegularityReport(gamma, holder_beta(gamma), M.prime_at_p0, fit, predicted)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_model(M: EffectiveModel, path) -> None:
    """Write the (mu, phi) table as versioned CSV plus the frozen rule next to it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION}\n")
        fh.write(f"# key={M.key()}\n")
        fh.write(f"# p0={float(M.p0)!r}\n")
        fh.write(f"# prime_at_p0={float(M.prime_at_p0)!r}\n")
        fh.write(f"# mu_max={float(M.mu_max)!r}\n")
        fh.write("mu,phi\n")
        for m, v in zip(M.mu_table, M.phi_table):
            fh.write(f"{float(m)!r},{float(v)!r}\n")
    np.savez(path.with_suffix(".rule.npz"), offsets=M.rule.offsets, weights=M.rule.weights,
             u_nodes=M.u_nodes, center=np.asarray(M.rule.center),
             inner=np.asarray(M.rule.inner_radius))


def load_model(path, P: Potential, spec: QuadratureSpec = DEFAULT_SPEC) -> EffectiveModel:
    """Inverse of save_model; verifies the version, the key and the table."""
    path = Path(path)
    meta = {}
    rows = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != f"# {CSV_VERSION}":
            raise ValueError(f"unsupported model file version: {first!r}")
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line and line != "mu,phi":
                rows.append([float(t) for t in line.split(",")])
    table = np.asarray(rows)
    mu_max = float(meta["mu_max"])
    if meta.get("key") != model_key(P, spec, mu_max, len(table)):
        raise ValueError("cached model does not match the requested potential and tolerances")
    data = np.load(path.with_suffix(".rule.npz"))
    rule = PolarRule(tuple(data["center"]), data["offsets"], data["weights"], float(data["inner"]))
    M = _assemble(P, mu_max, spec, len(table), rule, data["u_nodes"], float(meta["prime_at_p0"]))
    if not np.array_equal(M.phi_table, table[:, 1]):
        raise ValueError("cached table disagrees with its frozen rule")
    return M
