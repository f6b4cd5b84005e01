"""Characteristics at fixed energy and their large-time velocity averages.

A characteristic of energy r >= 0 moves with speed |eta'| = sqrt(2 (r - V(eta)))
and never reverses (r - V > 0 off the zero set of U).  Instead of stepping
the ODE, the position after time s is found by inverting the time of flight

    s = int_{x0}^{eta(s)} dx / sqrt(2 (r + U(xi x))).

`OrbitRule` freezes an adaptive Gauss-Kronrod panel set along the ray
x0 + direction * u (u >= 0) for a band of representative energies and extends
it on demand, so one rule serves every energy in the band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import fitting
from .effective import EffectiveModel, effective_H, effective_H_prime
from .errors import StationaryError
from .fitting import RateFit
from .quad import (DEFAULT_SPEC, NODES, WK, QuadratureSpec, adaptive_panels, integrate,
                   orbit_panel_width, panel_edges)
from .torus import A2, Potential

BLOCK = 4096
MAX_CHUNK = 4096.0


def exact_orbit_zeros(P: Potential, lo: float, hi: float) -> np.ndarray:
    """Points of [lo, hi] where U(xi x) vanishes exactly (the A2 minimizer at x = 0)."""
    if P.suspension.kind == A2 and lo <= 0.0 <= hi:
        return np.array([0.0])
    return np.empty(0)


def representative_energies(r_lo: float, r_hi: float, factor: float = 16.0) -> np.ndarray:
    """Geometric ladder covering [r_lo, r_hi]; a zero lower end is kept as is."""
    r_hi = max(r_hi, r_lo)
    if r_lo <= 0.0:
        head = [0.0]
        r_lo = min(1e-12, r_hi) if r_hi > 0 else 0.0
    else:
        head = []
    if r_hi <= 0:
        return np.array(head or [0.0])
    count = max(2, int(np.ceil(np.log(r_hi / r_lo) / np.log(factor))) + 1)
    return np.concatenate([head, np.geomspace(r_lo, r_hi, count)])


def invert_panel(kernel, lo: float, hi: float, rem: float, total: float) -> float:
    """w in [lo, hi] with int_lo^w kernel = rem, by Newton steps safeguarded with bisection.

    The partial integrals use GK15 on [lo, w]; `total` is the GK15 value of
    the whole panel, so rem >= total returns hi.
    """
    if rem <= 0:
        return lo
    if rem >= total:
        return hi
    a, b = lo, hi
    w = lo + (hi - lo) * rem / total
    tol = 2.0 * np.finfo(float).eps * max(1.0, abs(lo), abs(hi))
    for _ in range(100):
        c, h = 0.5 * (lo + w), 0.5 * (w - lo)
        vals = kernel(np.append(c + h * NODES, w))
        F = h * (vals[:15] @ WK) - rem
        if F > 0:
            b = w
        elif F < 0:
            a = w
        else:
            return w
        d = vals[15]
        step = w - F / d if (d > 0 and np.isfinite(d)) else 0.5 * (a + b)
        if abs(step - w) <= tol:
            return float(min(max(step, a), b))
        if not (a < step < b):
            step = 0.5 * (a + b)
        if b - a <= tol:
            return float(step)
        w = step
    return float(w)


class OrbitRule:
    """Adaptive panels along the ray u -> x0 + direction * u, extended lazily.

    Panels are refined until the time kernel 1/sqrt(2 (r + U)) and the action
    density sqrt(2 (r + U)) meet tolerance for every representative energy.
    Both are monotone in r, so intermediate energies are covered as well.
    """

    def __init__(self, P: Potential, start: float, direction: int, energies,
                 spec: QuadratureSpec = DEFAULT_SPEC):
        if direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        self.P = P
        self.start = float(start)
        self.direction = int(direction)
        self.spec = spec
        self.width = orbit_panel_width(P)
        energies = np.asarray(energies, dtype=float)
        zero_ahead = len(self._zeros(0.0, np.inf)) > 0 or (P.is_constant and P.sup_U == 0.0)
        if zero_ahead:
            # the r = 0 kernel is not integrable through an exact zero of U
            energies = energies[energies > 0]
            if len(energies) == 0:
                energies = np.array([1e-12])
        self.energies = energies
        self.left = np.empty(0)
        self.right = np.empty(0)
        self.nodes = np.empty((0, 15))
        self.weights = np.empty((0, 15))
        self.u = np.empty((0, 15))
        self.length = 0.0

    def x_of(self, s):
        return self.start + self.direction * np.asarray(s, dtype=float)

    def _zeros(self, a: float, b: float) -> np.ndarray:
        x1, x2 = self.x_of(a), self.x_of(min(b, 1e300))
        lo, hi = min(x1, x2), max(x1, x2)
        z = exact_orbit_zeros(self.P, lo, hi)
        s = self.direction * (z - self.start)
        return np.sort(s[s > 1e-300])

    def _components(self, s: np.ndarray) -> np.ndarray:
        u = self.P.U(self.x_of(s))
        base = 2.0 * (self.energies[:, None] + u[None, :])
        with np.errstate(divide="ignore"):
            return np.concatenate([1.0 / np.sqrt(base), np.sqrt(base)])

    def extend(self, new_length: float) -> None:
        a, b = self.length, float(new_length)
        if b <= a:
            return
        lo, hi = sorted((float(self.x_of(a)), float(self.x_of(b))))
        bps = self.direction * (self.P.orbit_zeros(lo, hi) - self.start)
        edges = panel_edges(a, b, self.width, bps)
        panels = adaptive_panels(self._components, edges, self.spec.abs_tol, self.spec.rel_tol,
                                 self.spec.max_subdivisions)
        c = 0.5 * (panels.left + panels.right)
        h = 0.5 * (panels.right - panels.left)
        nodes = c[:, None] + h[:, None] * NODES[None, :]
        self.left = np.concatenate([self.left, panels.left])
        self.right = np.concatenate([self.right, panels.right])
        self.nodes = np.vstack([self.nodes, nodes])
        self.weights = np.vstack([self.weights, h[:, None] * WK[None, :]])
        self.u = np.vstack([self.u, self.P.U(self.x_of(nodes))])
        self.length = b

    def _panel_partial(self, r: float, i: int, y: float, power: float) -> float:
        a = self.left[i]
        if y <= a:
            return 0.0
        c = 0.5 * (a + y)
        h = 0.5 * (y - a)
        vals = (2.0 * (r + self.P.U(self.x_of(c + h * NODES)))) ** power
        return float(h * (vals @ WK))

    def locate(self, r: float, tau: float, max_length: float | None = None):
        """Arc length u >= 0 reached after time tau at energy r, and the action integral.

        Returns (u, J) with J = int_0^u sqrt(2 (r + U)) along the ray.  If an
        exact zero of U blocks the ray at r = 0 and is not reached within time
        tau, u stops short of it; if it is reached, u equals its position.
        """
        if tau <= 0:
            return 0.0, 0.0
        if r < 0:
            raise ValueError("negative energies have turning points; not handled here")
        if r == 0.0 and self.P.U(self.start) == 0.0:
            raise StationaryError("zero energy at a zero of U: the characteristic is an equilibrium")
        speed_cap = np.sqrt(2.0 * (r + self.P.sup_U))
        bound = tau * speed_cap + 1.0 if max_length is None else max_length
        wall = self._zeros(0.0, bound)
        wall = wall[0] if (r == 0.0 and len(wall)) else None
        if wall is not None:
            bound = min(bound, wall)
        elapsed = 0.0
        action = 0.0
        i = 0
        while True:
            if i >= len(self.left):
                if self.length >= bound:
                    # ran out of ray: only possible at a wall
                    return float(self.length), action
                self.extend(min(bound, self.length + min(max(self.length, 16.0), MAX_CHUNK)))
                continue
            j = min(i + BLOCK, len(self.left))
            base = 2.0 * (r + self.u[i:j])
            with np.errstate(divide="ignore"):
                times = (self.weights[i:j] / np.sqrt(base)).sum(axis=1)
            cum = elapsed + np.cumsum(times)
            k = int(np.searchsorted(cum, tau))
            if k >= j - i:
                elapsed = float(cum[-1])
                action += float((self.weights[i:j] * np.sqrt(base)).sum())
                i = j
                continue
            p = i + k
            before = float(cum[k - 1]) if k > 0 else elapsed
            action += float((self.weights[i:p] * np.sqrt(base[: p - i])).sum())
            rem = tau - before
            lo, hi = self.left[p], self.right[p]
            if wall is not None and hi >= wall:
                g = lambda y: integrate(lambda s: (2.0 * (r + self.P.U(self.x_of(s)))) ** -0.5,
                                        lo, y, self.spec) - rem
                if g(hi * (1 - 1e-15)) < 0:
                    return float(wall), action + self._panel_partial(r, p, hi, 0.5)
                y = optimize.brentq(g, lo, hi * (1 - 1e-15), xtol=1e-14, rtol=1e-15)
            else:
                kern = lambda z: (2.0 * (r + self.P.U(self.x_of(z)))) ** -0.5
                y = invert_panel(kern, lo, hi, rem, float(times[k]))
            return float(y), action + self._panel_partial(r, p, y, 0.5)

    def trajectory(self, r: float, tau: float):
        """Panel-edge samples (u_i, T_i) of arc length and elapsed time up to time tau."""
        u_end, _ = self.locate(r, tau)
        last = int(np.searchsorted(self.right, u_end))
        base = 2.0 * (r + self.u[: last + 1])
        times = np.cumsum((self.weights[: last + 1] / np.sqrt(base)).sum(axis=1))
        return self.right[: last + 1], times


def walk(P: Potential, r: float, branch: int, start: float, times, spec: QuadratureSpec = DEFAULT_SPEC,
         on_chunk=None) -> np.ndarray:
    """Stream the characteristic chunk by chunk and return eta at the sorted `times`.

    Only the current chunk of panels is held in memory.  `on_chunk(right, T)`
    receives panel right edges (arc length) and the elapsed time at each.
    """
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    out = np.empty(len(times))
    kernel = lambda s: (2.0 * (r + P.U(start + branch * s))) ** -0.5
    width = orbit_panel_width(P)
    length, elapsed, chunk = 0.0, 0.0, 16.0
    n = 0
    while n < len(order) and times[order[n]] <= 0:
        out[order[n]] = start
        n += 1
    while n < len(order):
        a, b = length, length + chunk
        lo, hi = sorted((start + branch * a, start + branch * b))
        bps = branch * (P.orbit_zeros(lo, hi) - start)
        panels = adaptive_panels(kernel, panel_edges(a, b, width, bps), spec.abs_tol, spec.rel_tol,
                                 spec.max_subdivisions)
        cum = elapsed + np.cumsum(panels.values[0])
        if on_chunk is not None:
            on_chunk(panels.right, cum)
        while n < len(order) and times[order[n]] <= cum[-1]:
            tau = times[order[n]]
            k = int(np.searchsorted(cum, tau))
            before = cum[k - 1] if k > 0 else elapsed
            y = invert_panel(kernel, panels.left[k], panels.right[k], tau - before,
                             float(panels.values[0, k]))
            out[order[n]] = start + branch * y
            n += 1
        length, elapsed = b, float(cum[-1])
        chunk = min(2.0 * chunk, MAX_CHUNK)
    return out


@dataclass(frozen=True)
class Characteristic:
    potential: Potential
    energy: float
    branch: int  # +1 or -1
    start: float = 0.0

    def __post_init__(self):
        if self.branch not in (1, -1):
            raise ValueError("branch must be +1 or -1")


def characteristic_endpoint(c: Characteristic, s: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """eta(s): the point reached after time s, by time-of-flight inversion."""
    if c.energy < 0:
        raise ValueError("characteristic_endpoint handles r >= 0 only")
    if s < 0:
        raise ValueError("time must be nonnegative")
    if s == 0:
        return float(c.start)
    P = c.potential
    if c.energy == 0.0 and P.U(c.start) == 0.0:
        raise StationaryError("zero energy at a zero of U: eta is constant")
    if c.energy == 0.0 and P.suspension.kind == A2:
        rule = OrbitRule(P, c.start, c.branch, [c.energy], spec)
        u, _ = rule.locate(c.energy, s)
        return float(c.start + c.branch * u)
    return float(walk(P, c.energy, c.branch, c.start, [s], spec)[0])


def endpoint_and_action(P: Potential, r: float, branch: int, start: float, s: float,
                        spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """(eta(s), int_{start}^{eta(s)} sqrt(2 (r + U)) along the path)."""
    rule = OrbitRule(P, start, branch, [r], spec)
    u, J = rule.locate(r, s)
    return float(start + branch * u), J


DEFAULT_T_GRID = np.geomspace(1e2, 1e5, 8)


def _velocity_envelope(P: Potential, r: float, branch: int, t_grid: np.ndarray, target: float,
                       spec: QuadratureSpec) -> np.ndarray:
    """sup over s in [t/2, t] of |eta(s)/s - target| for every t of the grid."""
    env = np.zeros(len(t_grid))

    def collect(right, T):
        for n, t in enumerate(t_grid):
            lo, hi = np.searchsorted(T, [0.5 * t, t], side="left")
            if hi > lo:
                env[n] = max(env[n], float(np.max(np.abs(right[lo:hi] / T[lo:hi] - target))))

    ends = walk(P, r, branch, 0.0, t_grid, spec, on_chunk=collect)
    return np.maximum(env, np.abs(branch * ends / t_grid - target))


def velocity_average_rate(M: EffectiveModel, p: float, t_grid=DEFAULT_T_GRID,
                          spec: QuadratureSpec | None = None) -> RateFit:
    """Fit the decay of |eta(t)/t - Hbar'(p)| for the characteristic of p from x0 = 0.

    At |p| = p0 the one-sided derivative Hbar'_+(p0) is used.  Window
    envelopes sup_{[t/2, t]} are fitted because the pointwise error oscillates.
    """
    spec = spec or M.quad_spec
    t_grid = np.asarray(t_grid, dtype=float)
    r = effective_H(M, p)
    branch = 1 if p >= 0 else -1
    slope = abs(effective_H_prime(M, p))
    env = _velocity_envelope(M.potential, r, branch, t_grid, slope, spec)
    if np.all(env <= 1e-10):
        return fitting.RateFit(float("nan"), float("nan"), 0.0, fitting.POWER, len(t_grid), fitting.FLAT)
    return fitting.fit_power_law(t_grid, env, decay=True, floor=1e-10)


def velocity_errors(M: EffectiveModel, p: float, t_grid=DEFAULT_T_GRID,
                    spec: QuadratureSpec | None = None) -> np.ndarray:
    spec = spec or M.quad_spec
    r = effective_H(M, p)
    branch = 1 if p >= 0 else -1
    return _velocity_envelope(M.potential, r, branch, np.asarray(t_grid, dtype=float),
                              abs(effective_H_prime(M, p)), spec)


def critical_exponent(gamma: float) -> float:
    """Improved rate tau = (g-2)(3g-2) / ((g-2)(3g-2) + 4 g^2) for gamma > 2."""
    a = (gamma - 2.0) * (3.0 * gamma - 2.0)
    return a / (a + 4.0 * gamma**2)


def plain_critical_exponent(gamma: float) -> float:
    return (gamma - 2.0) / (3.0 * gamma - 2.0)


def critical_velocity_rate(M: EffectiveModel, t_grid=DEFAULT_T_GRID,
                           spec: QuadratureSpec | None = None) -> RateFit:
    """Fit the decay of |eta_0(t)/t| for the zero-energy characteristic (p = p0)."""
    U = M.potential.suspension
    if U.gamma is None or U.gamma <= 2:
        raise ValueError("the critical rate is defined for prototypes with gamma > 2")
    return velocity_average_rate(M, M.p0, t_grid, spec)
