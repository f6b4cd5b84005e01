"""Frequencies, torus suspensions and the quasi-periodic potentials they induce.

A potential on the line is V(x) = -U(xi x) where U >= 0 lives on the torus
T^n = R^n / Z^n and xi is a non-resonant frequency vector.  Two prototype
suspensions are built in (both on T^2):

    A1: U = (2 - sin 2 pi x1 - sin 2 pi x2)^gamma      minimum at (1/4, 1/4)
    A2: U = (2 - cos 2 pi x1 - cos 2 pi x2)^gamma      minimum at (0, 0)

They are evaluated through the equivalent half-angle forms
2 sin^2(pi(x1 - 1/4)) + 2 sin^2(pi(x2 - 1/4)) (resp. without the shift), which
keep full relative accuracy next to the minimizer.  A finite trigonometric
polynomial kind covers everything else, including constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy import optimize

from .errors import InvalidSuspensionError, ResonantFrequencyError

RESONANCE_THRESHOLD = 1e-12
SIGMA_STEP = 0.05
REFERENCE_CUTOFF = 10
ADMISSIBLE_RATIO = 0.1

A1 = "prototype-A1"
A2 = "prototype-A2"
TRIG = "trig-polynomial"


# --------------------------------------------------------------------------
# Frequencies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Frequency:
    """Frequency vector xi with an optional empirical Diophantine pair."""

    components: tuple[float, ...]
    estimated_sigma: float | None = None
    estimated_C: float | None = None
    resonance_cutoff: int | None = None

    def __post_init__(self):
        comps = tuple(float(c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) < 2:
            raise ValueError("a frequency needs at least two components")
        if any(c == 0.0 or not np.isfinite(c) for c in comps):
            raise ValueError(f"frequency components must be finite and nonzero: {comps}")

    @classmethod
    def estimated(cls, components: Sequence[float], K: int = 10_000) -> "Frequency":
        """Build a frequency and fill in (sigma, C) by `estimate_diophantine`."""
        sigma, C = estimate_diophantine(components, K)
        return cls(tuple(components), sigma, C, int(K))

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.components, dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _candidate_modes_2d(xi: np.ndarray, K: int) -> np.ndarray:
    """Integer vectors that can realize min |xi.k| |k|^s over 0 < |k| <= K.

    For a fixed k2 every k1 other than the two nearest to -xi2 k2 / xi1 has
    |xi.k| >= |xi1| and |k| >= 1, so it cannot beat k = (1, 0), which is kept.
    The candidate list is therefore exact for every s >= 0.
    """
    k2 = np.arange(1, K + 1, dtype=float)
    target = -xi[1] * k2 / xi[0]
    lo = np.floor(target)
    k1 = np.concatenate([lo, lo + 1.0])
    k2 = np.concatenate([k2, k2])
    modes = np.stack([k1, k2], axis=1)
    modes = np.vstack([modes, [[1.0, 0.0]]])
    keep = np.hypot(modes[:, 0], modes[:, 1]) <= K
    return modes[keep]


def _all_modes(n: int, K: int) -> np.ndarray:
    count = (2 * K + 1) ** n
    if count > 20_000_000:
        raise ValueError(f"brute-force mode scan too large for n={n}, K={K}")
    axes = [np.arange(-K, K + 1, dtype=float)] * n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    norms = np.linalg.norm(grid, axis=1)
    # keep one representative of each +-k pair
    first = np.argmax(grid != 0, axis=1)
    positive = grid[np.arange(len(grid)), first] > 0
    keep = (norms > 0) & (norms <= K) & positive
    return grid[keep]


def diophantine_profile(components: Sequence[float], K: int):
    """Return (modes, |xi.k|, |k|) for the modes relevant to the estimate."""
    xi = np.asarray(components, dtype=float)
    if len(xi) == 2:
        modes = _candidate_modes_2d(xi, int(K))
    else:
        modes = _all_modes(len(xi), int(K))
    dots = np.abs(modes @ xi)
    norms = np.linalg.norm(modes, axis=1)
    return modes, dots, norms


def _tight_constant(dots: np.ndarray, norms: np.ndarray, sigma: float) -> float:
    return float(np.min(dots * norms**sigma))


def sigma_grid(n: int) -> np.ndarray:
    count = int(round(2.0 / SIGMA_STEP)) + 1
    return (n - 1) + SIGMA_STEP * np.arange(count)


def estimate_diophantine(components: Sequence[float], K: int) -> tuple[float, float]:
    """Empirical Diophantine pair (sigma, C) with |xi.k| >= C |k|^-sigma for |k| <= K.

    Every sigma gives a positive constant on a finite mode set, so a sigma on
    the grid {n-1, n-1+0.05, ..., n+1} is called admissible when its tight
    constant over |k| <= K has not collapsed below 10% of the constant over
    |k| <= 10.  The smallest admissible sigma is returned with its tight
    constant.  Admissibility only gets harder as K grows, so the estimate is
    nondecreasing in K.  Raises ResonantFrequencyError on an integer relation.
    """
    if K < 2:
        raise ValueError("cutoff K must be at least 2")
    xi = np.asarray(components, dtype=float)
    n = len(xi)
    modes, dots, norms = diophantine_profile(xi, K)
    worst = int(np.argmin(dots))
    if dots[worst] < RESONANCE_THRESHOLD:
        raise ResonantFrequencyError(modes[worst], dots[worst])
    near = norms <= min(REFERENCE_CUTOFF, K)
    grid = sigma_grid(n)
    for sigma in grid:
        c_full = _tight_constant(dots, norms, sigma)
        c_ref = _tight_constant(dots[near], norms[near], sigma)
        if c_full >= ADMISSIBLE_RATIO * c_ref:
            return float(sigma), c_full
    sigma = float(grid[-1])
    return sigma, _tight_constant(dots, norms, sigma)


def check_nonresonant(components: Sequence[float], K: int = 50) -> None:
    """Raise ResonantFrequencyError if some |xi.k| < 1e-12 with |k| <= K."""
    modes, dots, _ = diophantine_profile(components, K)
    worst = int(np.argmin(dots))
    if dots[worst] < RESONANCE_THRESHOLD:
        raise ResonantFrequencyError(modes[worst], dots[worst])


# --------------------------------------------------------------------------
# Suspensions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Suspension:
    """Nonnegative continuous function U on T^n.

    `coefficients` maps integer modes to complex amplitudes (trig kind only) and
    is stored as a sorted tuple so the object stays hashable.
    """

    kind: str
    gamma: float | None = None
    coefficients: tuple = ()
    minimizer: tuple[float, ...] = ()
    min_value: float = 0.0
    max_value: float = 0.0
    dim: int = 2
    certificate_margin: float = 0.0

    @classmethod
    def prototype_a1(cls, gamma: float) -> "Suspension":
        if not gamma > 0:
            raise InvalidSuspensionError("prototype exponent must be positive")
        return cls(A1, float(gamma), (), (0.25, 0.25), 0.0, 4.0**gamma, 2)

    @classmethod
    def prototype_a2(cls, gamma: float) -> "Suspension":
        if not gamma > 0:
            raise InvalidSuspensionError("prototype exponent must be positive")
        return cls(A2, float(gamma), (), (0.0, 0.0), 0.0, 4.0**gamma, 2)

    @classmethod
    def constant(cls, c: float, dim: int = 2) -> "Suspension":
        if c < 0:
            raise InvalidSuspensionError("a constant suspension must be nonnegative")
        mode = (0,) * dim
        return cls(TRIG, None, ((mode, complex(c)),), (0.0,) * dim, float(c), float(c), dim)

    @classmethod
    def trig_polynomial(cls, coefficients: Mapping[Sequence[int], complex], dim: int | None = None,
                        grid: int = 1024) -> "Suspension":
        """Certify nonnegativity by a grid scan plus a Lipschitz margin."""
        items = {}
        for mode, c in coefficients.items():
            key = tuple(int(k) for k in mode)
            items[key] = items.get(key, 0.0) + complex(c)
        if not items:
            raise InvalidSuspensionError("empty coefficient map")
        dims = {len(k) for k in items}
        if len(dims) != 1:
            raise InvalidSuspensionError("modes of mixed dimension")
        n = dims.pop() if dim is None else int(dim)
        for k, c in items.items():
            partner = items.get(tuple(-x for x in k), 0.0)
            if abs(partner - np.conj(c)) > 1e-12 * max(1.0, abs(c)):
                raise InvalidSuspensionError(f"coefficients are not Hermitian at mode {k}")
        coeffs = tuple(sorted(items.items()))
        probe = cls(TRIG, None, coeffs, (0.0,) * n, 0.0, 0.0, n)
        lo, argmin, hi, margin = _certify(probe, grid)
        return cls(TRIG, None, coeffs, argmin, lo, hi, n, margin)

    def modes(self) -> tuple[np.ndarray, np.ndarray]:
        ks = np.array([k for k, _ in self.coefficients], dtype=float).reshape(-1, self.dim)
        cs = np.array([c for _, c in self.coefficients], dtype=complex)
        return ks, cs

    @property
    def sup_norm(self) -> float:
        return float(self.max_value)

    def __call__(self, x) -> np.ndarray:
        return eval_suspension(self, x)


def _prototype_base(kind: str, x: np.ndarray) -> np.ndarray:
    shift = 0.25 if kind == A1 else 0.0
    s1 = np.sin(np.pi * (x[..., 0] - shift))
    s2 = np.sin(np.pi * (x[..., 1] - shift))
    return 2.0 * (s1 * s1 + s2 * s2)


def _trig_values(U: Suspension, x: np.ndarray) -> np.ndarray:
    ks, cs = U.modes()
    phase = 2.0 * np.pi * (x @ ks.T)
    return (np.cos(phase) @ cs.real) - (np.sin(phase) @ cs.imag)


@numba.njit(cache=True)
def _prototype_orbit(x, xi1, xi2, shift, gamma):
    """Prototype values along the orbit, same half-angle form as `_prototype_base`."""
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        a = xi1 * x[i]
        a -= math.floor(a)
        b = xi2 * x[i]
        b -= math.floor(b)
        s1 = math.sin(math.pi * (a - shift))
        s2 = math.sin(math.pi * (b - shift))
        base = 2.0 * (s1 * s1 + s2 * s2)
        out[i] = base if gamma == 1.0 else base**gamma
    return out


@numba.njit(cache=True)
def _prototype_difference(h, xref, xi1, xi2, shift, gamma):
    """U(xref + h) - U(xref) along the orbit without cancellation.

    With s = sin(pi (xi x - shift)), the difference of squares is factored as
    (s - s_ref)(s + s_ref) and s - s_ref comes from a sum-to-product formula
    in the offset h, so small offsets keep full relative accuracy.
    """
    out = np.empty(h.shape[0])
    a0 = xi1 * xref
    a0 -= 2.0 * math.floor(0.5 * a0)
    b0 = xi2 * xref
    b0 -= 2.0 * math.floor(0.5 * b0)
    r1 = math.sin(math.pi * (a0 - shift))
    r2 = math.sin(math.pi * (b0 - shift))
    base0 = 2.0 * (r1 * r1 + r2 * r2)
    u0 = base0**gamma
    for i in range(h.shape[0]):
        da = xi1 * h[i]
        db = xi2 * h[i]
        s1 = math.sin(math.pi * (a0 + da - shift))
        s2 = math.sin(math.pi * (b0 + db - shift))
        d1 = 2.0 * math.cos(math.pi * (a0 + 0.5 * da - shift)) * math.sin(0.5 * math.pi * da)
        d2 = 2.0 * math.cos(math.pi * (b0 + 0.5 * db - shift)) * math.sin(0.5 * math.pi * db)
        dbase = 2.0 * (d1 * (s1 + r1) + d2 * (s2 + r2))
        if base0 > 0.0:
            out[i] = u0 * math.expm1(gamma * math.log1p(dbase / base0))
        else:
            out[i] = (base0 + dbase) ** gamma
    return out


@numba.njit(cache=True)
def _prototype_derivatives(x, xi1, xi2, shift, gamma):
    """U, U' and U'' along the orbit from base = sum (1 - cos theta_i)."""
    out = np.empty((3, x.shape[0]))
    for i in range(x.shape[0]):
        a = xi1 * x[i]
        a -= math.floor(a)
        b = xi2 * x[i]
        b -= math.floor(b)
        s1 = math.sin(math.pi * (a - shift))
        s2 = math.sin(math.pi * (b - shift))
        base = 2.0 * (s1 * s1 + s2 * s2)
        t1 = 2.0 * math.pi * (a - shift)
        t2 = 2.0 * math.pi * (b - shift)
        d1 = 2.0 * math.pi * (xi1 * math.sin(t1) + xi2 * math.sin(t2))
        d2 = 4.0 * math.pi**2 * (xi1 * xi1 * math.cos(t1) + xi2 * xi2 * math.cos(t2))
        if base > 0.0:
            g1 = gamma * base ** (gamma - 1.0)
            g2 = gamma * (gamma - 1.0) * base ** (gamma - 2.0)
        else:
            g1 = 0.0
            g2 = 0.0
        out[0, i] = base**gamma
        out[1, i] = g1 * d1
        out[2, i] = g2 * d1 * d1 + g1 * d2
    return out


def eval_suspension(U: Suspension, x) -> np.ndarray | float:
    """U evaluated at torus points x with shape (..., n); x is reduced mod 1."""
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1] != U.dim:
        raise ValueError(f"expected points of dimension {U.dim}, got shape {arr.shape}")
    arr = arr - np.floor(arr)
    # tiny negative inputs round up to exactly 1.0
    arr = np.where(arr >= 1.0, 0.0, arr)
    if U.kind in (A1, A2):
        out = _prototype_base(U.kind, arr)
        if U.gamma != 1.0:
            out = out**U.gamma
    else:
        out = _trig_values(U, arr)
        if U.min_value >= 0 and np.any(out < -1e-12 - U.certificate_margin):
            raise InvalidSuspensionError("trig-polynomial suspension returned a negative value")
        out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def _certify(U: Suspension, grid: int):
    n = U.dim
    m = grid if n == 2 else max(16, int(round((2**20) ** (1.0 / n))))
    axes = [np.arange(m) / m] * n
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    vals = np.empty(len(pts))
    for start in range(0, len(pts), 1 << 16):
        vals[start:start + (1 << 16)] = _trig_values(U, pts[start:start + (1 << 16)])
    ks, cs = U.modes()
    lip = float(np.sum(np.abs(cs) * 2.0 * np.pi * np.linalg.norm(ks, axis=1)))
    margin = lip * np.sqrt(n) / (2.0 * m)
    i = int(np.argmin(vals))
    res = optimize.minimize(lambda y: float(_trig_values(U, y[None, :])[0]), pts[i],
                            method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
    lo = min(float(vals[i]), float(res.fun))
    argmin = res.x if res.fun <= vals[i] else pts[i]
    if lo < -RESONANCE_THRESHOLD:
        raise InvalidSuspensionError(f"trig polynomial takes the negative value {lo:.3e}")
    hi = float(np.max(vals)) + margin
    argmin = tuple(float(a) for a in (np.asarray(argmin) % 1.0))
    return max(lo, 0.0), argmin, hi, margin


def local_bounds(U: Suspension, radius: float = 0.1, samples: int = 2000, seed: int = 0):
    """Fit (C1, C2) with C1 |h|^(2 gamma) <= U(x0 + h) <= C2 |h|^(2 gamma) for |h| <= radius."""
    if U.kind not in (A1, A2):
        raise ValueError("local bounds are defined for prototype suspensions")
    rng = np.random.default_rng(seed)
    h = rng.uniform(-radius, radius, size=(samples, 2))
    h = h[np.linalg.norm(h, axis=1) > 1e-6]
    vals = eval_suspension(U, np.asarray(U.minimizer) + h)
    ratio = vals / np.linalg.norm(h, axis=1) ** (2 * U.gamma)
    return float(ratio.min()), float(ratio.max())


# --------------------------------------------------------------------------
# Potentials on the line
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """V(x) = -U(xi x) on the real line."""

    suspension: Suspension
    frequency: Frequency

    def __post_init__(self):
        if self.suspension.dim != self.frequency.n:
            raise ValueError("suspension and frequency dimensions differ")

    def orbit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., None] * self.frequency.vector

    def U(self, x) -> np.ndarray | float:
        """Positive orbit values U(xi x)."""
        s = self.suspension
        if s.kind in (A1, A2) and s.dim == 2:
            arr = np.asarray(x, dtype=float)
            flat = np.ascontiguousarray(arr.ravel())
            xi = self.frequency.vector
            out = _prototype_orbit(flat, float(xi[0]), float(xi[1]), 0.25 if s.kind == A1 else 0.0,
                                   float(s.gamma))
            return out.reshape(arr.shape) if arr.ndim else float(out[0])
        if self.is_constant:
            value = float(s.coefficients[0][1].real)
            arr = np.asarray(x, dtype=float)
            return np.full(arr.shape, value) if arr.ndim else value
        return eval_suspension(s, self.orbit(x))

    def U_difference(self, x_ref: float, h) -> np.ndarray | float:
        """U(x_ref + h) - U(x_ref), accurate for small offsets h on prototypes."""
        s = self.suspension
        arr = np.asarray(h, dtype=float)
        if s.kind in (A1, A2) and s.dim == 2:
            xi = self.frequency.vector
            out = _prototype_difference(np.ascontiguousarray(arr.ravel()), float(x_ref), float(xi[0]),
                                        float(xi[1]), 0.25 if s.kind == A1 else 0.0, float(s.gamma))
            return out.reshape(arr.shape) if arr.ndim else float(out[0])
        return self.U(x_ref + arr) - self.U(x_ref)

    def U_derivatives(self, x) -> np.ndarray:
        """Rows U, U', U'' at the points x (analytic for prototypes, differences otherwise)."""
        s = self.suspension
        arr = np.atleast_1d(np.asarray(x, dtype=float))
        if s.kind in (A1, A2) and s.dim == 2:
            xi = self.frequency.vector
            return _prototype_derivatives(np.ascontiguousarray(arr), float(xi[0]), float(xi[1]),
                                          0.25 if s.kind == A1 else 0.0, float(s.gamma))
        h = 1e-4
        u = [self.U(arr + k * h) for k in (-2, -1, 0, 1, 2)]
        d1 = (u[0] - 8 * u[1] + 8 * u[3] - u[4]) / (12 * h)
        d2 = (-u[0] + 16 * u[1] - 30 * u[2] + 16 * u[3] - u[4]) / (12 * h * h)
        return np.vstack([u[2], d1, d2])

    def __call__(self, x):
        return eval_potential(self, x)

    @property
    def sup_U(self) -> float:
        return self.suspension.sup_norm

    @property
    def is_constant(self) -> bool:
        s = self.suspension
        return s.kind == TRIG and all(not any(k) for k, _ in s.coefficients)

    def orbit_zeros(self, a: float, b: float) -> np.ndarray:
        """Points of [a, b] where the orbit passes closest to images of the minimizer.

        One point per lattice image with a perpendicular foot inside [a, b]
        (n = 2 only; empty otherwise).  These are the breakpoints that isolate
        the slow regions of U(xi x).
        """
        if self.frequency.n != 2 or self.is_constant:
            return np.empty(0)
        xi = self.frequency.vector
        x0 = np.asarray(self.suspension.minimizer, dtype=float)
        # For each integer m1 near xi1 x, the nearest lattice shift in the second
        # coordinate gives the closest image; parametrize by the first coordinate.
        lo, hi = (a, b) if a <= b else (b, a)
        p = np.sort([xi[0] * lo, xi[0] * hi])
        m1 = np.arange(np.floor(p[0] - x0[0]) - 1, np.ceil(p[1] - x0[0]) + 2)
        # point on the orbit where the first coordinate equals x0[0] + m1
        t1 = (x0[0] + m1) / xi[0]
        y2 = xi[1] * t1 - x0[1]
        m2 = np.round(y2)
        c = np.stack([x0[0] + m1, x0[1] + m2], axis=1)
        feet = c @ xi / (xi @ xi)
        extra = []
        # a second family parametrized by the second coordinate catches images
        # missed when |xi2| > |xi1|
        q = np.sort([xi[1] * lo, xi[1] * hi])
        n2 = np.arange(np.floor(q[0] - x0[1]) - 1, np.ceil(q[1] - x0[1]) + 2)
        t2 = (x0[1] + n2) / xi[1]
        n1 = np.round(xi[0] * t2 - x0[0])
        c2 = np.stack([x0[0] + n1, x0[1] + n2], axis=1)
        extra = c2 @ xi / (xi @ xi)
        allfeet = np.unique(np.concatenate([feet, extra]))
        return allfeet[(allfeet > lo) & (allfeet < hi)]


def eval_potential(P: Potential, x) -> np.ndarray | float:
    """V(x) = -U(xi x mod 1)."""
    return -eval_suspension(P.suspension, P.orbit(x))


def prototype_potential(kind: str, gamma: float, xi: Sequence[float] = (1.0, np.sqrt(2.0))) -> Potential:
    if kind in ("A1", A1):
        U = Suspension.prototype_a1(gamma)
    elif kind in ("A2", A2):
        U = Suspension.prototype_a2(gamma)
    else:
        raise ValueError(f"unknown prototype {kind!r}")
    return Potential(U, Frequency(tuple(xi)))


def constant_potential(c: float, xi: Sequence[float] = (1.0, np.sqrt(2.0))) -> Potential:
    """V = -c; U = 0 gives the free Hamiltonian."""
    return Potential(Suspension.constant(c, len(xi)), Frequency(tuple(xi)))
