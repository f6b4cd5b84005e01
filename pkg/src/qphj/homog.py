"""Oscillatory and homogenized solutions of u_t + |u_x|^2/2 + V(x/eps) = 0.

u^eps is computed from the optimal-control formula restricted to energy
surfaces.  In the fast variable a backward characteristic of energy r starts
at x/eps and runs for time t/eps; its action is

    A(r) = -r t + eps * int sqrt(2 (r + U)) |d eta| + u0(eps * eta_end),

the integral being taken over the traversed path.  For r >= 0 the path is
monotone and the endpoint comes from time-of-flight inversion.  For r < 0 the
characteristic lives on the component of {U >= -r} containing the start; it
bounces between turning walls (where U = -r) and the endpoint follows from
unfolding the periodic motion.  u^eps is the minimum of A over r and both
initial directions.

u (homogenized) uses the Hopf-Lax formula with the effective Lagrangian, and
`fd_viscosity_solve` is an independent monotone finite-difference oracle.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize

from . import fitting
from .dynamics import OrbitRule, invert_panel, representative_energies, walk
from .effective import EffectiveModel, effective_L
from .errors import ConfigError, QuadratureError
from .fitting import RateFit
from .quad import DEFAULT_SPEC, NODES, WK, QuadratureSpec, adaptive_panels, orbit_panel_width, panel_edges
from .torus import Potential

AFFINE = "affine"
CONE = "cone"
BUMP = "smooth-bump"

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class InitialData:
    """Lipschitz initial data u0.

    affine: a y + b;  cone: -depth * min(|y|, radius);  smooth-bump: h exp(-y^2 / (2 w^2)).
    """

    kind: str
    parameters: tuple
    lipschitz_constant: float

    @classmethod
    def affine(cls, a: float, b: float = 0.0) -> "InitialData":
        return cls(AFFINE, (float(a), float(b)), abs(float(a)))

    @classmethod
    def cone(cls, depth: float = 1.0, radius: float = 1.0) -> "InitialData":
        if radius <= 0:
            raise ValueError("radius must be positive")
        return cls(CONE, (float(depth), float(radius)), abs(float(depth)))

    @classmethod
    def bump(cls, height: float = 1.0, width: float = 0.5) -> "InitialData":
        if width <= 0:
            raise ValueError("width must be positive")
        return cls(BUMP, (float(height), float(width)), abs(height) / (width * math.sqrt(math.e)))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == AFFINE:
            a, b = self.parameters
            out = a * y + b
        elif self.kind == CONE:
            d, R = self.parameters
            out = -d * np.minimum(np.abs(y), R)
        elif self.kind == BUMP:
            h, w = self.parameters
            out = h * np.exp(-0.5 * (y / w) ** 2)
        else:
            raise ValueError(f"unknown initial data kind {self.kind!r}")
        return float(out) if out.ndim == 0 else out

    @property
    def kinks(self) -> tuple[float, ...]:
        if self.kind == CONE:
            R = self.parameters[1]
            return (0.0,) if not np.isfinite(R) else (-R, 0.0, R)
        return ()

    @property
    def infimum(self) -> float:
        if self.kind == AFFINE:
            return 0.0 if self.parameters[0] == 0 else -np.inf
        if self.kind == CONE:
            d, R = self.parameters
            return -d * R if d > 0 else 0.0
        return min(0.0, self.parameters[0])

    def minimum_on(self, a: float, b: float, samples: int = 257) -> float:
        """min of u0 over [a, b] (exact for the piecewise-linear kinds)."""
        a, b = min(a, b), max(a, b)
        pts = [a, b] + [k for k in self.kinks if a < k < b]
        if self.kind == BUMP:
            pts += list(np.linspace(a, b, samples))
            if self.parameters[0] < 0 and a < 0 < b:
                pts.append(0.0)
        return float(np.min(self(np.array(pts))))


@dataclass(frozen=True)
class HomogenizationResult:
    point: tuple[float, float]
    epsilon: float
    u_eps: float
    u_hom: float
    argmin_energy: float
    branch: str  # "+", "-", "nonpositive", "linger-turn" or "linger-pass"
    sandwich_bound: float = float("nan")
    evaluations: int = 0
    failed_candidates: int = 0

    @property
    def error(self) -> float:
        return abs(self.u_eps - self.u_hom)


def energy_cutoff(u0: InitialData, P: Potential) -> float:
    """Energy r0 beyond which no characteristic can be optimal.

    r0 is the fixed point of r = C sqrt(2 (r + S)) + S with C = Lip(u0) and
    S = sup U; substituting z = sqrt(r + S) gives z^2 - sqrt(2) C z - 2 S = 0.
    """
    C = u0.lipschitz_constant
    S = P.sup_U
    z = 0.5 * (math.sqrt(2.0) * C + math.sqrt(2.0 * C * C + 8.0 * S))
    return max(z * z - S, 0.0)


def _rule(P: Potential, start: float, branch: int, r_hi: float, spec: QuadratureSpec) -> OrbitRule:
    return OrbitRule(P, start, branch, representative_energies(0.0, max(r_hi, 1e-12)), spec)


def action_value(P: Potential, u0: InitialData, r: float, branch: int, x: float, t: float, eps: float,
                 spec: QuadratureSpec = DEFAULT_SPEC, rule: OrbitRule | None = None) -> float:
    """A(r) for a monotone characteristic (r >= 0) started at x/eps, run for time t/eps."""
    if r < 0:
        raise ValueError("action_value handles r >= 0; negative energies go through NegativeBranch")
    s0 = x / eps
    if r == 0.0 and P.U(s0) == 0.0:
        # equilibrium: the path stays at the start
        return float(u0(x))
    if rule is None:
        rule = _rule(P, s0, branch, r, spec)
    u, J = rule.locate(r, t / eps)
    return float(-r * t + eps * J + u0(eps * (s0 + branch * u)))


# ---------------------------------------------------------------------------
# negative energies


SHORT_LEG = 1e-5
WALL_MODEL = 1e-5
WALL_STENCIL = 1e-4
# deepest negative energy tried, relative to U(s0); deeper starts are numerically turning points
NEGATIVE_DEPTH = 1e-6


class _Leg:
    """Monotone stretch from the start s0 over offsets z in [0, Z], possibly ending at a turning wall.

    Offsets are kept relative to s0 so short stretches are not swamped by the
    rounding of absolute positions.  The stretch is parametrized by w in [0, W]
    with z = w, or, when it ends at a wall, z = Z - (W - w)^2 with W = sqrt(Z),
    which removes the inverse square-root singularity of the time kernel.
    `excess(z, d)` returns r + U at s0 + sigma z, where d = Z - z is supplied
    exactly so models can avoid cancellation next to the wall.
    """

    def __init__(self, r: float, s0: float, sigma: float, Z: float, wall: bool, excess,
                 spec: QuadratureSpec, panel: float, breaks=()):
        self.r, self.s0, self.sigma, self.Z, self.wall, self.excess = r, s0, sigma, Z, wall, excess
        self.W = math.sqrt(Z) if wall else Z
        if wall:
            self.Z = Z = self.W * self.W
        if Z <= 0.0:
            self.W = 0.0
            self.left = self.right = self.cum_time = self.cum_action = np.zeros(0)
            return
        z_edges = panel_edges(0.0, Z, panel, [b for b in breaks if 0.0 < b < Z])
        w_edges = self.W - np.sqrt(np.maximum(Z - z_edges, 0.0)) if wall else z_edges
        w_edges = np.unique(np.clip(w_edges, 0.0, self.W))
        panels = adaptive_panels(self._kernels, w_edges, spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
        self.left, self.right = panels.left, panels.right
        self.cum_time = np.cumsum(panels.values[0])
        self.cum_action = np.cumsum(panels.values[1])

    def z_of(self, w):
        w = np.asarray(w, dtype=float)
        return w * (2.0 * self.W - w) if self.wall else w

    def y_of(self, w) -> float:
        return float(self.s0 + self.sigma * self.z_of(w))

    def _kernels(self, w):
        if self.wall:
            jac = 2.0 * (self.W - w)
            d = (self.W - w) ** 2
            z = w * (2.0 * self.W - w)
        else:
            jac = np.ones_like(w)
            z = w
            d = self.Z - w
        e = np.maximum(2.0 * self.excess(z, d), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            time = np.where(e > 0, jac / np.sqrt(e), 0.0)
        return np.vstack([time, jac * np.sqrt(e)])

    @property
    def time(self) -> float:
        return float(self.cum_time[-1]) if len(self.cum_time) else 0.0

    @property
    def action(self) -> float:
        return float(self.cum_action[-1]) if len(self.cum_action) else 0.0

    def _partial(self, i: int, w: float) -> np.ndarray:
        a = self.left[i]
        if w <= a:
            return np.zeros(2)
        c, h = 0.5 * (a + w), 0.5 * (w - a)
        return h * (self._kernels(c + h * NODES) @ WK)

    def locate(self, tau: float) -> tuple[float, float]:
        """Position reached at time tau after leaving s0 along this leg, and the action so far."""
        if tau <= 0 or len(self.left) == 0:
            return self.s0, 0.0
        if tau >= self.time:
            return self.y_of(self.W), self.action
        k = int(np.searchsorted(self.cum_time, tau))
        t_before = self.cum_time[k - 1] if k > 0 else 0.0
        a_before = self.cum_action[k - 1] if k > 0 else 0.0
        rem = tau - t_before
        total = self.cum_time[k] - t_before
        w = invert_panel(lambda z: self._kernels(z)[0], self.left[k], self.right[k], rem, total)
        return self.y_of(w), float(a_before + self._partial(k, w)[1])


def _taylor_profile(P: Potential, s0: float, sigma: float, h: float = 1e-4):
    """Quadratic model z -> U0 + a z + b z^2 of U(s0 + sigma z) from a five-point stencil."""
    U0, d1, d2, _ = _stencil(P, s0, sigma, h)
    return U0, d1, 0.5 * d2


def _stencil(P: Potential, y: float, sigma: float, h: float):
    """U and its first three derivatives along sigma at y (five-point differences)."""
    u = P.U(y + sigma * h * np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
    d1 = (u[0] - 8 * u[1] + 8 * u[3] - u[4]) / (12 * h)
    d2 = (-u[0] + 16 * u[1] - 30 * u[2] + 16 * u[3] - u[4]) / (12 * h * h)
    d3 = (-u[0] + 2 * u[1] - 2 * u[3] + u[4]) / (2 * h ** 3)
    return float(P.U(y)), d1, d2, d3


def _wall_excess(P: Potential, far, s0: float, sigma: float, Z: float, wall: float):
    """r + U along a leg ending at `wall`, with a cubic model in d = Z - z next to the wall.

    Close to the wall r + U is a difference of nearly equal numbers; when U is
    small and flat there the cancellation leaves pure noise, which adaptive
    quadrature cannot resolve.  The model uses r + U(wall) = 0 exactly; `far(z)`
    supplies r + U elsewhere.
    """
    d_switch = min(WALL_MODEL, 0.25 * Z)
    _, f1, f2, f3 = _stencil(P, wall, sigma, WALL_STENCIL)
    _, g1, g2, _ = _stencil(P, wall, sigma, 0.5 * WALL_STENCIL)
    # both differences are fourth order: one Richardson step
    f1, f2 = (16.0 * g1 - f1) / 15.0, (16.0 * g2 - f2) / 15.0

    def excess(z, d):
        z = np.asarray(z, dtype=float)
        d = np.asarray(d, dtype=float)
        near = d * (-f1 + d * (0.5 * f2 - d * f3 / 6.0))
        return np.where(d < d_switch, near, far(z))

    return excess, Z - d_switch


# ---------------------------------------------------------------------------
# lingering next to a local minimum of U
#
# At energy r = -U_k -/+ c with c -> 0 a characteristic spends a time of order
# log(1/c) / sqrt(U''(x_k)) next to the dip x_k.  Such c underflow relative to
# U_k, so these paths are parametrized by ell = log c and the stretch within
# NEAR_ZONE of the dip uses the quadratic well, whose time and action are
# closed-form in ell.

TURN = "turn"
PASS = "pass"
NEAR_ZONE = 1e-6
LINGER_CAP = 0.3
LN2 = math.log(2.0)


def _log_sinh(v: float) -> float:
    if v <= 0.0:
        return -math.inf
    return v - LN2 + math.log1p(-math.exp(-2.0 * v)) if v > 1e-3 else math.log(math.sinh(v))


def _log_cosh(v: float) -> float:
    v = abs(v)
    return v - LN2 + math.log1p(math.exp(-2.0 * v))


def _acosh_exp(L: float) -> float:
    """arccosh(e^L) for L >= 0 without overflow."""
    return L + math.log1p(math.sqrt(max(-math.expm1(-2.0 * L), 0.0))) if L > 0 else 0.0


def _asinh_exp(L: float) -> float:
    return L + math.log1p(math.sqrt(1.0 + math.exp(-2.0 * L))) if L > 0 else math.asinh(math.exp(L))


@dataclass(frozen=True)
class _Anchor:
    side: int
    index: int
    x: float  # position of the dip
    U: float
    a: float  # U'' at the dip
    gap: float  # how far every value of U between the start and the dip stays above U
    dist: float
    zone: float

    @property
    def offset(self) -> float:
        return self.side * self.dist


class _Well:
    """Stretch inside the quadratic well D = a d^2 / 2 around a dip.

    Distances d are measured from the dip back towards the start.  TURN: energy
    just below the dip level, entering at d = zone and stopping at the turning
    point d_w = sqrt(2c/a).  PASS: energy just above it, crossing from d = zone
    to d = -zone.  With d = d_w cosh u (TURN) or d = d_c sinh u (PASS) the
    time is u / sqrt(a) and the action integral is (c / sqrt(a)) (sinh(2u)/2 -/+ u).
    """

    def __init__(self, anchor: _Anchor, mode: str, ell: float):
        self.x, self.sigma, self.mode, self.ell = anchor.x, anchor.side, mode, ell
        self.sa = math.sqrt(anchor.a)
        self.ln_d = 0.5 * (LN2 + ell - math.log(anchor.a))
        L = math.log(anchor.zone) - self.ln_d
        self.wall = mode == TURN
        if self.wall:
            self.u_in = _acosh_exp(L)
            self.time = self.u_in / self.sa
        else:
            self.u_in = _asinh_exp(L)
            self.time = 2.0 * self.u_in / self.sa
        self.action = self._integral(self.u_in) * (1.0 if self.wall else 2.0)

    def _integral(self, u: float) -> float:
        """Action from the centre (d_w or 0) out to parameter u."""
        au = abs(u)
        big = math.exp(self.ell - math.log(self.sa) + _log_sinh(2.0 * au) - LN2) if au > 0 else 0.0
        small = math.exp(self.ell) * au / self.sa
        val = big - small if self.wall else big + small
        return math.copysign(val, u)

    def locate(self, tau: float) -> tuple[float, float]:
        tau = min(max(tau, 0.0), self.time)
        u = self.u_in - self.sa * tau
        if self.wall:
            d = math.exp(self.ln_d + _log_cosh(u))
            return self.x - self.sigma * d, self.action - self._integral(u)
        d = math.copysign(math.exp(self.ln_d + _log_sinh(abs(u))), u) if u != 0 else 0.0
        return self.x - self.sigma * d, 0.5 * self.action - self._integral(u)


class _Chain:
    """Consecutive stretches traversed in order, with the interface of a single leg."""

    def __init__(self, pieces):
        self.pieces = [p for p in pieces if p.time > 0 or p is pieces[-1]]
        self.wall = pieces[-1].wall
        self.time = float(sum(p.time for p in self.pieces))
        self.action = float(sum(p.action for p in self.pieces))

    def locate(self, tau: float) -> tuple[float, float]:
        acc = 0.0
        for p in self.pieces[:-1]:
            if tau <= p.time:
                y, a = p.locate(tau)
                return y, acc + a
            tau -= p.time
            acc += p.action
        y, a = self.pieces[-1].locate(tau)
        return y, acc + a


def _walk_legs(first, second, tau: float) -> tuple[float, float]:
    """Unfold the back-and-forth motion between the ends of two legs leaving the start in opposite directions."""
    if not first.wall or tau <= first.time:
        return first.locate(tau)
    action = first.action
    rem = tau - first.time
    if second.wall:
        period = 2.0 * (first.time + second.time)
        cycles = math.floor(rem / period)
        rem -= cycles * period
        action += cycles * 2.0 * (first.action + second.action)
    # back along `first` towards s0
    if rem <= first.time:
        y, a = first.locate(first.time - rem)
        return y, action + first.action - a
    action += first.action
    rem -= first.time
    if not second.wall or rem <= second.time:
        y, a = second.locate(rem)
        return y, action + a
    action += second.action
    rem -= second.time
    # back from the far wall towards s0
    y, a = second.locate(second.time - rem)
    return y, action + second.action - a


class NegativeBranch:
    """Exact actions of the r < 0 characteristics started at s0.

    A characteristic of energy r < 0 cannot leave the interval reached by the
    r = 0 characteristics in the same time, so walls are searched only inside
    [eta0^-, eta0^+].  The local minima of U along that interval are found
    once; for each r the walls are the first crossings of U = -r on either side.
    """

    def __init__(self, P: Potential, s0: float, left: float, right: float, spec: QuadratureSpec):
        self.P, self.s0, self.spec = P, float(s0), spec
        self.lo, self.hi = min(left, s0), max(right, s0)
        self.U0 = float(P.U(self.s0))
        self._cache: dict = {}
        self._dips_right = self._dips(self.s0, self.hi)
        self._dips_left = self._dips(self.s0, self.lo)

    def _dips(self, a: float, b: float):
        """Local minima of U between a and b ordered by distance from a, with the preceding maxima."""
        span = abs(b - a)
        sgn = 1.0 if b >= a else -1.0
        if span == 0:
            return np.empty(0), np.empty(0), np.empty(0)
        h = orbit_panel_width(self.P) / 32.0
        n = max(3, int(math.ceil(span / h)) + 1)
        d = np.linspace(0.0, span, n)
        u = self.P.U(a + sgn * d)
        interior = np.nonzero((u[1:-1] <= u[:-2]) & (u[1:-1] <= u[2:]))[0] + 1
        # a dip closer to the start than one grid step shows up only as a descending start
        if u[1] >= u[0] and sgn * self.P.U_derivatives(a)[1, 0] < 0:
            interior = np.concatenate([[0], interior])
        lo, hi = d[np.maximum(interior - 1, 0)], d[interior + 1]
        pos = _golden_min_vectorized(lambda z: self.P.U(a + sgn * z), lo, hi)
        vals = self.P.U(a + sgn * pos)
        # the far end acts as a dip so a descending tail is not missed
        pos = np.concatenate([pos, [span]])
        vals = np.concatenate([vals, [u[-1]]])
        # the highest point between consecutive dips brackets the crossing from above
        starts = np.concatenate([[0], interior])
        stops = np.concatenate([interior, [n - 1]])
        peaks = np.empty(len(pos))
        for k, (i, j) in enumerate(zip(starts, stops)):
            peaks[k] = d[i + int(np.argmax(u[i:j + 1]))]
        return pos, vals, peaks

    def wall(self, r: float, side: int) -> float | None:
        """First point on `side` where U = -r, or None if none lies inside the reachable interval."""
        pos, vals, peaks = self._dips_right if side > 0 else self._dips_left
        level = -r
        below = np.nonzero(vals < level)[0]
        if len(below) == 0:
            return None
        k = below[0]
        g = lambda z: float(self.P.U(self.s0 + side * z)) - level
        a, b = peaks[k], pos[k]
        if g(a) < 0:
            # the start itself sits at the level: walk back to the start
            a = 0.0
        z = optimize.brentq(g, a, b, xtol=1e-15 * max(1.0, b), rtol=1e-15) if g(a) > 0 else a
        # keep the wall on the admissible side
        for _ in range(60):
            if g(z) >= 0 or z <= a:
                break
            z = np.nextafter(z, a)
        return self.s0 + side * z

    def _leg(self, r: float, side: int) -> _Leg:
        P, s0 = self.P, self.s0
        wall = self.wall(r, side)
        panel = orbit_panel_width(P)
        if wall is None:
            Z = abs((self.hi if side > 0 else self.lo) - s0)
            return _Leg(r, s0, side, Z, False, lambda z, d: r + P.U(s0 + side * z), self.spec, panel)
        Z = abs(wall - s0)
        if Z >= SHORT_LEG:
            excess, brk = _wall_excess(P, lambda z: r + P.U(s0 + side * z), s0, side, Z, wall)
            return _Leg(r, s0, side, Z, True, excess, self.spec, panel, breaks=(brk,))
        # the wall hugs the start: use a local model free of position rounding
        U0, a, b = _taylor_profile(P, s0, side)
        c = U0 + r
        Zm = None
        if a < 0:
            disc = a * a - 4.0 * b * c
            Zm = (2.0 * c) / (-a + math.sqrt(max(disc, 0.0)))
            if 0 < Zm < 10 * SHORT_LEG:
                Z = Zm
        # r + U = c + a z + b z^2 = (Z - z) (-a - b (z + Z)) when Z is the model's root
        if Z == Zm:
            model = lambda z, d: d * (-a - b * (2.0 * Z - d))
        else:
            model = lambda z, d: c + a * z + b * z * z
        return _Leg(r, s0, side, Z, True, model, self.spec, panel)

    def endpoint(self, r: float, direction: int, tau: float) -> tuple[float, float]:
        """(eta(tau), traversed action integral) for energy r < 0 and initial direction."""
        if not (-self.U0 <= r < 0):
            raise ValueError("r must lie in [-U(s0), 0)")
        legR, legL = self._legs(r)
        return _walk_legs(legR, legL, tau) if direction > 0 else _walk_legs(legL, legR, tau)

    def _legs(self, r: float):
        legs = self._cache.get(r)
        if legs is None:
            legs = self._cache[r] = (self._leg(r, 1), self._leg(r, -1))
            if len(self._cache) > 16:
                self._cache.pop(next(iter(self._cache)))
        return legs

    # -- lingering -------------------------------------------------------

    def anchors(self, side: int) -> list[_Anchor]:
        """Dips on `side` lower than U at the start and at every earlier dip."""
        pos, vals, _ = self._dips_right if side > 0 else self._dips_left
        out = []
        floor = self.U0
        h = orbit_panel_width(self.P) / 32.0
        for k in range(len(pos) - 1):  # the last entry is the end of the interval
            if vals[k] >= floor:
                continue
            x0 = x = self.s0 + side * pos[k]
            for _ in range(8):
                _, d1, d2 = self.P.U_derivatives(x)[:, 0]
                if d2 <= 0:
                    break
                step = d1 / d2
                x -= step
                if abs(step) <= 1e-15 * max(1.0, abs(x)):
                    break
            if abs(x - x0) > h:
                x = x0
            Uk, _, a = self.P.U_derivatives(x)[:, 0]
            dist = abs(x - self.s0)
            if a > 0 and Uk < floor and dist > 1e-11:
                zone = min(NEAR_ZONE, 1e-4 * math.sqrt(Uk / a), 0.5 * dist)
                out.append(_Anchor(side, k, float(x), float(Uk), float(a), float(floor - Uk), dist, zone))
            floor = min(floor, vals[k])
        return out

    def _D(self, anchor: _Anchor, origin: float, sigma: int):
        """z -> U(x_k + origin + sigma z) - U_k without cancellation."""
        P, xk = self.P, anchor.x
        return lambda z: P.U_difference(xk, origin + sigma * np.asarray(z, dtype=float))

    def _anchored_leg(self, anchor: _Anchor, mode: str, ell: float):
        c = math.exp(ell)
        cs = c if mode == TURN else -c
        side, zone, panel = anchor.side, anchor.zone, orbit_panel_width(self.P)
        negligible = c < 1e-17 * 0.5 * anchor.a * zone * zone
        key = (side, anchor.index, mode, 0.0 if negligible else c)
        far = self._cache.get(key)
        r = -(anchor.U + cs)
        if far is None:
            D = self._D(anchor, -anchor.offset, side)
            Zf = anchor.dist - zone
            if mode == TURN and math.sqrt(2.0 * c / anchor.a) >= 0.5 * zone:
                # the turning point is far enough from the dip for ordinary quadrature
                _, _, peaks = self._dips_right if side > 0 else self._dips_left
                z_wall = optimize.brentq(lambda z: float(D(z)) - c, peaks[anchor.index], anchor.dist,
                                         xtol=1e-15 * anchor.dist, rtol=1e-15)
                excess, brk = _wall_excess(self.P, lambda z: D(z) - c, self.s0, side, z_wall,
                                           self.s0 + side * z_wall)
                wall_leg = _Leg(r, self.s0, side, z_wall, True, excess, self.spec, panel,
                                breaks=(brk,) + tuple(z_wall - 4.0 ** -np.arange(1, 12)))
                far = (wall_leg, None)
            else:
                breaks = tuple(anchor.dist - zone * 4.0 ** np.arange(1, 12))
                approach = _Leg(r, self.s0, side, Zf, False, lambda z, d: D(z) - cs, self.spec, panel, breaks)
                beyond = self._beyond(anchor, c) if mode == PASS else None
                far = (approach, beyond)
            self._cache[key] = far
            if len(self._cache) > 16:
                self._cache.pop(next(iter(self._cache)))
        approach, beyond = far
        if beyond is None and approach.wall:
            return r, approach
        pieces = [approach, _Well(anchor, mode, ell)]
        if beyond is not None:
            pieces.append(beyond)
        return r, _Chain(pieces)

    def _beyond(self, anchor: _Anchor, c: float) -> _Leg:
        """Leg from the far edge of the well onwards at energy -(U_k - c)."""
        side, zone = anchor.side, anchor.zone
        pos, vals, peaks = self._dips_right if side > 0 else self._dips_left
        start = anchor.x + side * zone
        z0 = anchor.dist + zone
        D = self._D(anchor, side * zone, side)
        r = -(anchor.U - c)
        panel = orbit_panel_width(self.P)
        breaks = tuple(zone * 4.0 ** np.arange(1, 12))
        lower = [j for j in range(anchor.index + 1, len(pos)) if vals[j] < anchor.U - c]
        if not lower:
            Z = abs((self.hi if side > 0 else self.lo) - start)
            return _Leg(r, start, side, Z, False, lambda z, d: D(z) + c, self.spec, panel, breaks)
        j = lower[0]
        lo = max(peaks[j] - z0, 0.0)
        hi = pos[j] - z0
        g = lambda z: float(D(z)) + c
        Z = optimize.brentq(g, lo, hi, xtol=1e-15 * max(1.0, hi), rtol=1e-15) if g(lo) > 0 else lo
        excess, brk = _wall_excess(self.P, lambda z: D(z) + c, start, side, Z, start + side * Z)
        return _Leg(r, start, side, Z, True, excess, self.spec, panel, breaks=breaks + (brk,))

    def linger_endpoint(self, anchor: _Anchor, mode: str, ell: float, direction: int,
                        tau: float) -> tuple[float, float, float]:
        """(energy, eta(tau), action integral) for r = -U_k -/+ e^ell and initial direction."""
        r, near = self._anchored_leg(anchor, mode, ell)
        key = (r, -anchor.side)
        other = self._cache.get(key)
        if other is None:
            other = self._cache[key] = self._leg(r, -anchor.side)
        first, second = (near, other) if direction == anchor.side else (other, near)
        y, J = _walk_legs(first, second, tau)
        return r, y, J

    def linger_range(self, anchor: _Anchor, tau: float) -> tuple[float, float]:
        """Range of ell = log c worth scanning: from lingering for the whole time up to c = LINGER_CAP U_k."""
        lo = math.log(0.5 * anchor.a) + 2.0 * math.log(anchor.zone) - 2.0 * math.sqrt(anchor.a) * (tau + 1.0)
        hi = math.log(min(LINGER_CAP * anchor.U, 0.5 * anchor.gap))
        return lo, hi


def _golden_min_vectorized(f, lo: np.ndarray, hi: np.ndarray, iterations: int = 60) -> np.ndarray:
    a, b = lo.astype(float).copy(), hi.astype(float).copy()
    if len(a) == 0:
        return a
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iterations):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - GOLDEN * (b - a)
        d_new = a + GOLDEN * (b - a)
        c, d = c_new, d_new
        fc, fd = f(c), f(d)
    return 0.5 * (a + b)


def golden_section(f, a: float, b: float, xtol: float = 1e-12, max_iter: int = 200) -> tuple[float, float]:
    """Minimize a unimodal scalar function on [a, b]; returns (argmin, min) including the endpoints."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= xtol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    best = min([(fc, c), (fd, d), (f(a), a), (f(b), b)])
    return best[1], best[0]


# ---------------------------------------------------------------------------
# u^eps


@dataclass
class _Family:
    label: str
    direction: int
    energies: np.ndarray  # the family parameter: r, or log c for lingering paths
    values: np.ndarray
    evaluate: object
    energy_of: object = None

    def energy(self, param: float) -> float:
        return float(param) if self.energy_of is None else float(self.energy_of(param))


def u_eps(P: Potential, u0: InitialData, x: float, t: float, eps: float,
          spec: QuadratureSpec = DEFAULT_SPEC, r_points: int = 200, negative_points: int = 100,
          linger_points: int = 32, refine: int = 3) -> HomogenizationResult:
    """Minimal action over energies and initial directions at (x, t)."""
    if not (0 < eps <= 1):
        raise ValueError("eps must lie in (0, 1]")
    if t <= 0:
        raise ValueError("t must be positive")
    s0, tau = x / eps, t / eps
    r0 = energy_cutoff(u0, P)
    inf_u0 = u0.infimum
    count = 0
    failures = [0]

    # zero energy fixes the reachable interval and the first upper bound
    stationary = P.U(s0) == 0.0
    zero_end = {}
    zero_val = {}
    rules = {}
    for d in (1, -1):
        if stationary:
            zero_end[d], zero_val[d] = s0, float(u0(x))
            continue
        rule = _rule(P, s0, d, 1e-12, spec)
        u, J = rule.locate(0.0, tau)
        zero_end[d] = s0 + d * u
        zero_val[d] = float(eps * J + u0(eps * zero_end[d]))
        count += 1
    best = min(zero_val.values())
    prune = (best - inf_u0) / t if np.isfinite(inf_u0) else np.inf
    r_hi = min(r0, prune) if r0 > 0 else 0.0

    families: list[_Family] = []
    if r_hi > 0:
        grid = np.concatenate([[0.0], r_hi * np.geomspace(1e-12, 1.0, r_points - 1)])
        for d in (1, -1):
            rule = _rule(P, s0, d, r_hi, spec)
            rules[d] = rule

            def ev(r, d=d, rule=rule):
                if r == 0.0:
                    return zero_val[d]
                u, J = rule.locate(r, tau)
                return float(-r * t + eps * J + u0(eps * (s0 + d * u)))

            vals = np.full(len(grid), np.inf)
            vals[0] = zero_val[d]
            for i in range(1, len(grid)):
                if grid[i] * t + inf_u0 >= best:
                    break
                vals[i] = ev(grid[i])
                count += 1
                best = min(best, vals[i])
            families.append(_Family("+" if d > 0 else "-", d, grid, vals, ev))
    else:
        for d in (1, -1):
            families.append(_Family("+" if d > 0 else "-", d, np.array([0.0]), np.array([zero_val[d]]),
                                    lambda r, d=d: zero_val[d]))

    U0 = float(P.U(s0))
    sandwich = u0.minimum_on(eps * zero_end[-1], eps * zero_end[1])
    neg = NegativeBranch(P, s0, zero_end[-1], zero_end[1], spec) if U0 > 0 else None
    if U0 > 0 and negative_points > 0:
        depth = U0 * (1.0 - NEGATIVE_DEPTH)
        if np.isfinite(inf_u0):
            depth = min(depth, max((best - inf_u0) / t, 0.0))
        if depth > 0:
            grid = np.concatenate([-depth * np.geomspace(1.0, 1e-12, negative_points), [0.0]])
            fams = {}
            for d in (1, -1):

                def ev(r, d=d, neg=neg):
                    if r >= 0.0:
                        return zero_val[d]
                    try:
                        y, J = neg.endpoint(r, d, tau)
                    except QuadratureError:
                        failures[0] += 1
                        return np.inf
                    return float(-r * t + eps * J + u0(eps * y))

                fams[d] = _Family("nonpositive", d, grid, np.full(len(grid), np.inf), ev)
                fams[d].values[-1] = zero_val[d]
            for i in range(len(grid) - 2, -1, -1):
                if -grid[i] * t + inf_u0 >= best:
                    break
                for d in (1, -1):
                    fams[d].values[i] = fams[d].evaluate(grid[i])
                    count += 1
                    best = min(best, fams[d].values[i])
            families.extend(fams.values())

    # paths that linger next to a dip lower than everything before it
    if neg is not None and linger_points > 0:
        for side in (1, -1):
            for anchor in neg.anchors(side):
                if (1.0 - LINGER_CAP) * anchor.U * t + inf_u0 >= best:
                    continue
                lo, hi = neg.linger_range(anchor, tau)
                if hi <= lo:
                    continue
                grid = np.linspace(lo, hi, linger_points)
                for mode in (TURN, PASS):
                    sign = 1.0 if mode == TURN else -1.0
                    for d in (1, -1):

                        def ev(ell, anchor=anchor, mode=mode, d=d):
                            try:
                                r, y, J = neg.linger_endpoint(anchor, mode, ell, d, tau)
                            except (QuadratureError, ValueError):
                                failures[0] += 1
                                return np.inf
                            return float(-r * t + eps * J + u0(eps * y))

                        fam = _Family(f"linger-{mode}", d, grid, np.full(len(grid), np.inf), ev,
                                      lambda ell, anchor=anchor, sign=sign: -(anchor.U + sign * math.exp(ell)))
                        for i, ell in enumerate(grid):
                            if (anchor.U + sign * math.exp(ell)) * t + inf_u0 >= best:
                                continue
                            fam.values[i] = ev(ell)
                            count += 1
                            best = min(best, fam.values[i])
                        families.append(fam)

    # golden-section polish around the best grid candidates
    cands = []
    for fam in families:
        for i in np.argsort(fam.values)[:refine]:
            if np.isfinite(fam.values[i]):
                cands.append((fam.values[i], id(fam), int(i), fam))
    cands.sort(key=lambda c: c[0])
    best_val, best_r, best_label = np.inf, 0.0, "+"
    for fam in families:
        i = int(np.argmin(fam.values))
        if fam.values[i] < best_val:
            best_val, best_r, best_label = float(fam.values[i]), fam.energy(fam.energies[i]), fam.label
    for val, _, i, fam in cands[:refine]:
        lo = fam.energies[max(i - 1, 0)]
        hi = fam.energies[min(i + 1, len(fam.energies) - 1)]
        if hi <= lo:
            continue
        calls = [0]

        def f(r, fam=fam):
            calls[0] += 1
            return fam.evaluate(r)

        r_star, v_star = golden_section(f, lo, hi, xtol=1e-13)
        count += calls[0]
        if v_star < best_val:
            best_val, best_r, best_label = float(v_star), fam.energy(r_star), fam.label
    return HomogenizationResult((float(x), float(t)), float(eps), best_val, float("nan"), best_r, best_label,
                                sandwich, count, failures[0])


# ---------------------------------------------------------------------------
# u (homogenized)


_SCANS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _lagrangian_scan(M: EffectiveModel, samples: int):
    """(log mu, q, Lbar(q)) on a geometric mu grid down to 1e-30 mu_max, cached per model."""
    cache = _SCANS.setdefault(M, {})
    if samples not in cache:
        mu = M.mu_max * np.geomspace(1e-30, 1.0, samples)
        q = 1.0 / M.dphi_values(mu)
        cache[samples] = (np.log(mu), q, M.phi_values(mu) * q - mu)
    return cache[samples]


def u_hom(M: EffectiveModel, u0: InitialData, x: float, t: float, samples: int = 200) -> float:
    """Hopf-Lax: min over y of t Lbar((x - y)/t) + u0(y).

    On the flat part |q| <= Hbar'_+(p0) the Lagrangian is p0 |q|.  Beyond it
    the slope q = (x - y)/t is parametrized by mu through q = 1/phi'(mu) and
    t Lbar(q) = t (phi(mu) q - mu), so every trial point costs two torus moments
    and no root finding.  A coarse geometric scan in mu (down to 1e-30 mu_max)
    is polished by golden section in log mu around the best candidates; the
    kinks of u0 and y = x are added as exact candidates.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    best = float(u0(x))
    slope0 = M.prime_at_p0
    if slope0 > 0:
        # flat part of Lbar: y in [x - t slope0, x + t slope0]
        for side in (1.0, -1.0):
            g = lambda y, side=side: M.p0 * abs(x - y) + u0(y)
            lo, hi = sorted((x, x - side * t * slope0))
            pts = [lo, hi] + [k for k in u0.kinks if lo < k < hi]
            best = min(best, min(float(g(y)) for y in pts))
            _, v = golden_section(g, lo, hi, xtol=1e-13)
            best = min(best, float(v))

    def curved(log_mu, side):
        mu = np.exp(log_mu)
        q = 1.0 / M.dphi_values(mu)
        ph = M.phi_values(mu)
        return t * (ph * q - mu) + u0(x - side * t * q)

    grid, q_scan, L_scan = _lagrangian_scan(M, samples)
    for side in (1.0, -1.0):
        vals = t * L_scan + u0(x - side * t * q_scan)
        best = min(best, float(vals.min()))
        for i in np.argsort(vals)[:3]:
            lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
            _, v = golden_section(lambda z: float(curved(np.array([z]), side)[0]), lo, hi, xtol=1e-9)
            best = min(best, float(v))
        for k in u0.kinks:
            q = side * (x - k) / t
            if q > slope0 and q < M.q_max:
                best = min(best, t * effective_L(M, q) + float(u0(k)))
    return best


# ---------------------------------------------------------------------------
# finite-difference oracle


@numba.njit(cache=True)
def _godunov(u, V, dx, t_end, cfl):
    n = u.shape[0]
    new = np.empty_like(u)
    t = 0.0
    steps = 0
    while t < t_end:
        smax = 0.0
        for i in range(n - 1):
            g = abs(u[i + 1] - u[i]) / dx
            if g > smax:
                smax = g
        dt = cfl * dx / max(smax, 1e-12)
        if t + dt >= t_end:
            dt = t_end - t
        for i in range(n):
            ul = u[i - 1] if i > 0 else u[i]
            ur = u[i + 1] if i < n - 1 else u[i]
            pm = max((u[i] - ul) / dx, 0.0)
            pp = min((ur - u[i]) / dx, 0.0)
            h = 0.5 * max(pm * pm, pp * pp) + V[i]
            new[i] = u[i] - dt * h
        u, new = new, u
        t += dt
        steps += 1
    return u, steps


@dataclass(frozen=True)
class FDSolution:
    x: np.ndarray
    u: np.ndarray
    t: float
    steps: int

    def at(self, points) -> np.ndarray:
        return np.interp(np.asarray(points, dtype=float), self.x, self.u)


def dependence_radius(P: Potential, x_max: float, t: float, r_cap: float) -> float:
    """Crude half-width from the largest speed sqrt(2 (r_cap + sup U)) anywhere."""
    return abs(x_max) + t * math.sqrt(2.0 * (max(r_cap, 0.0) + P.sup_U)) + 1.0


def dependence_interval(P: Potential, points, t: float, eps: float, r_cap: float,
                        margin: float = 1.0, spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """Interval holding every backward characteristic of energy <= r_cap from the points.

    Speed sqrt(2 (r + U)) increases with r at every position, so the
    characteristics of energy r_cap leaving the extreme points outrun all
    others; their endpoints after time t bound the domain of dependence.
    """
    pts = np.asarray(points, dtype=float)
    r = max(float(r_cap), 1e-12)
    lo = walk(P, r, -1, float(pts.min()) / eps, [t / eps], spec)[0] * eps
    hi = walk(P, r, 1, float(pts.max()) / eps, [t / eps], spec)[0] * eps
    return float(lo) - margin, float(hi) + margin


def fd_viscosity_solve(P: Potential, u0: InitialData, eps: float, domain: tuple[float, float],
                       dx: float, cfl_factor: float = 0.9, t: float = 1.0) -> FDSolution:
    """Godunov scheme for u_t + |u_x|^2/2 + V(x/eps) = 0 with constant boundary extrapolation.

    The time step adapts to dt = cfl_factor * dx / max|u_x|, which keeps the
    scheme monotone for cfl_factor <= 1.
    """
    if not (0 < cfl_factor <= 1):
        raise ConfigError(f"CFL factor {cfl_factor} would make the scheme non-monotone")
    if dx <= 0 or t < 0:
        raise ConfigError("dx must be positive and t nonnegative")
    a, b = domain
    n = int(round((b - a) / dx)) + 1
    xs = a + dx * np.arange(n)
    V = -np.asarray(P.U(xs / eps), dtype=float)
    u, steps = _godunov(np.asarray(u0(xs), dtype=float).copy(), V, dx, float(t), float(cfl_factor))
    return FDSolution(xs, u, float(t), int(steps))


# ---------------------------------------------------------------------------
# rate sweep


@dataclass(frozen=True)
class SweepConfig:
    potential: Potential
    gamma: float | None
    u0: InitialData
    epsilons: tuple[float, ...]
    points: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    t: float = 1.0
    r_points: int = 200
    negative_points: int = 100
    spec: QuadratureSpec = DEFAULT_SPEC

    def __post_init__(self):
        if len(self.epsilons) < 6:
            raise ConfigError("the eps grid needs at least six points")
        e = np.asarray(self.epsilons)
        ratios = e[1:] / e[:-1]
        if np.any(e <= 0) or np.any(e > 1) or not np.allclose(ratios, ratios[0], rtol=1e-9):
            raise ConfigError("the eps grid must be geometric inside (0, 1]")


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)  # (eps, x, u_eps, u_hom, error, r*, branch)
    errors: np.ndarray | None = None
    fit: RateFit | None = None
    log_fit: RateFit | None = None
    predicted: dict = field(default_factory=dict)


def predicted_rates(gamma: float | None) -> dict:
    """Exponents guaranteed for prototype potentials (upper = decay of u_eps - u, lower = of u - u_eps)."""
    if gamma is None:
        return {"upper": None, "lower": None, "upper_model": None}
    if gamma > 2:
        return {"upper": (gamma - 2.0) / (3.0 * gamma - 2.0), "lower": 1.0, "upper_model": fitting.POWER}
    if gamma == 2:
        return {"upper": None, "lower": 0.5, "upper_model": fitting.RECIPROCAL_LOG}
    lower = 0.5 if gamma >= 1 else gamma / (gamma + 1.0)
    return {"upper": None, "lower": lower, "upper_model": None}


def rate_sweep(config: SweepConfig, model: EffectiveModel) -> ExperimentReport:
    """e(eps) = max over evaluation points of |u_eps - u| with power-law and 1/|log eps| fits."""
    report = ExperimentReport(predicted=predicted_rates(config.gamma))
    hom = {x: u_hom(model, config.u0, x, config.t) for x in config.points}
    errs = []
    for eps in config.epsilons:
        worst = 0.0
        for x in config.points:
            res = u_eps(config.potential, config.u0, x, config.t, eps, config.spec,
                        config.r_points, config.negative_points)
            err = abs(res.u_eps - hom[x])
            worst = max(worst, err)
            report.rows.append((eps, x, res.u_eps, hom[x], err, res.argmin_energy, res.branch))
        errs.append(worst)
    report.errors = np.array(errs)
    eps = np.asarray(config.epsilons, dtype=float)
    report.fit = fitting.fit_power_law(eps, report.errors, decay=False, floor=1e-14)
    report.log_fit = fitting.fit_reciprocal_log(eps, report.errors)
    return report
