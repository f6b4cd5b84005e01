"""Quantitative Birkhoff averages along the orbit xi x, epsilon-periods and inclusion lengths.

Observables are torus functions F evaluated on points of shape (..., n).  The
orbit average (1/T) int_0^T F(xi x) dx tends to the torus integral of F; the
experiments here measure how fast.  Raw average errors oscillate in T, so rates
are fitted to the envelope sup_{T' in [T/2, T]} |avg(T') - mean| sampled on a
uniform grid of each window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceSuspectedError, HypothesisFailedError, NotFoundError
from .fitting import (RateFit, fit_log_law, fit_power_law)
from .quad import (DEFAULT_SPEC, QuadratureSpec, fourier_coefficients, orbit_integral,
                   running_integral, suspension_integrand, torus_integral)
from .torus import A1, A2, Potential, Suspension, eval_suspension

__all__ = [
    "RateFit", "ErgodicReport", "DEFAULT_T_GRID", "birkhoff_average", "birkhoff_errors",
    "birkhoff_rate_experiment", "fourier_mode_sum", "fourier_rate_bound", "inverse_sqrt_mean",
    "unbounded_mean_experiment", "unbounded_target", "epsilon_period_search", "inclusion_lengths",
    "inclusion_length_fit", "shift_defects",
]

DEFAULT_T_GRID = 10.0 ** np.arange(2.0, 5.51, 0.5)
WINDOW_SAMPLES = 512
ERROR_FLOOR = 1e-12
A2_OFFSET = 0.5

Observable = Callable[[np.ndarray], np.ndarray]


@dataclass
class ErgodicReport:
    """Outcome of one rate experiment.

    `values` holds the orbit averages at the grid times and `errors` the
    quantity that was fitted (window envelopes of |avg - mean| for decay
    experiments, the averages themselves for growth experiments).
    """

    observable: str
    mean_value: float
    divergent: bool
    fit: RateFit
    T_grid: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    target: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(T), float(v), float(e)) for T, v, e in zip(self.T_grid, self.values, self.errors)]


def _width(xi) -> float:
    return min(0.25, 1.0 / float(np.linalg.norm(xi)))


def birkhoff_average(F: Observable, xi, T: float, spec: QuadratureSpec = DEFAULT_SPEC,
                     start: float = 0.0) -> float:
    """(1/T) * integral of F(xi x) over [start, start + T]."""
    if not T > 0:
        raise ValueError("T must be positive")
    return orbit_integral(F, xi, start, start + T, spec) / T


def _window_points(T_grid: np.ndarray, samples: int) -> tuple[np.ndarray, list[slice]]:
    pts, slices, k = [], [], 0
    for T in T_grid:
        w = np.linspace(0.5 * T, T, samples)
        pts.append(w)
        slices.append(slice(k, k + samples))
        k += samples
    return np.concatenate(pts), slices


def birkhoff_errors(F: Observable, xi, mean: float, T_grid, spec: QuadratureSpec = DEFAULT_SPEC,
                    samples: int = WINDOW_SAMPLES, start: float = 0.0, breakpoints=()):
    """Averages at the grid times and window envelopes of |avg - mean|.

    The centred observable F - mean is integrated so long averages do not lose
    digits to cancellation.
    """
    xi = np.asarray(xi, dtype=float)
    T_grid = np.asarray(T_grid, dtype=float)
    pts, slices = _window_points(T_grid, samples)
    g = lambda x: np.asarray(F(x[:, None] * xi), dtype=float) - mean
    C = running_integral(g, start + pts, _width(xi), breakpoints, spec, origin=start)
    dev = np.abs(C) / pts
    env = np.array([dev[s].max() for s in slices])
    ends = np.array([C[s][-1] for s in slices]) / T_grid + mean
    return ends, env


def birkhoff_rate_experiment(F: Observable, xi, T_grid=DEFAULT_T_GRID, mean: float | None = None,
                             spec: QuadratureSpec = DEFAULT_SPEC, tag: str = "F",
                             center=None, target: float | None = None) -> ErgodicReport:
    """Fit the decay of |avg(T) - mean| on log-log axes.

    `mean` defaults to the torus integral of F (refined around `center` when
    F is singular or merely Holder there).  A fit whose errors all sit below
    1e-12 is returned flagged rather than trusted.
    """
    if mean is None:
        mean = torus_integral(F, spec, center=center)
    T_grid = np.asarray(T_grid, dtype=float)
    vals, env = birkhoff_errors(F, xi, mean, T_grid, spec)
    fit = fit_power_law(T_grid, env, decay=True, floor=ERROR_FLOOR)
    return ErgodicReport(tag, float(mean), False, fit, T_grid, vals, env, target)


def sqrt_observable(U: Suspension) -> tuple[Observable, float]:
    """sqrt(U) as a torus observable together with its torus integral."""
    F = lambda x: np.sqrt(eval_suspension(U, x))
    mean = torus_integral(suspension_integrand(U, np.sqrt))
    return F, float(mean)


def holder_rate(alpha: float) -> float:
    """Expected decay exponent alpha / (alpha + 1) for Holder data of order alpha."""
    return alpha / (alpha + 1.0)


# --------------------------------------------------------------------------
# Fourier bounds
# --------------------------------------------------------------------------


def _nonzero_modes(F: Observable, N: int, dim: int):
    coef, modes = fourier_coefficients(F, N, dim)
    k = modes.reshape(-1, dim)
    c = coef.reshape(-1)
    keep = np.any(k != 0, axis=1)
    # the Nyquist row is aliased; drop it so the retained set is symmetric
    keep &= np.all(np.abs(k) < N // 2, axis=1)
    return k[keep], c[keep]


def fourier_mode_sum(F: Observable, xi, N: int = 64) -> float:
    """Constant C with |int_0^T (F(xi x) - mean) dx| <= C for every T, from truncated Fourier data.

    Each mode contributes |F_k| |e^{2 pi i k.xi T} - 1| / |2 pi k.xi| <= |F_k| / (pi |k.xi|).
    """
    xi = np.asarray(xi, dtype=float)
    k, c = _nonzero_modes(F, N, len(xi))
    mag = np.abs(c)
    big = mag > 1e-14 * max(1.0, float(mag.max(initial=0.0)))
    if not np.any(big):
        return 0.0
    return float(np.sum(mag[big] / (np.pi * np.abs(k[big] @ xi))))


def fourier_rate_bound(F: Observable, xi, s: float, N: int, sigma: float, C: float) -> float:
    """Sobolev form of the mode-sum bound for a Diophantine xi with |k.xi| >= C |k|^-sigma.

    Returns (1/(pi C)) * (sum |k|^-(n+s))^(1/2) * (sum |k|^(n+s+2 sigma) |F_k|^2)^(1/2)
    over the nonzero modes with |k|_inf < N/2; this constant times 1/T bounds
    the average error.  Requires s > n/2 + sigma.
    """
    xi = np.asarray(xi, dtype=float)
    n = len(xi)
    if not s > n / 2 + sigma:
        raise HypothesisFailedError(f"need s > n/2 + sigma = {n / 2 + sigma:g}, got s = {s:g}")
    if not C > 0:
        raise ValueError("the Diophantine constant must be positive")
    k, c = _nonzero_modes(F, N, n)
    norm = np.linalg.norm(k, axis=1)
    mag2 = np.abs(c) ** 2
    if not np.any(mag2 > 1e-28):
        return 0.0
    lattice = math.sqrt(float(np.sum(norm ** -(n + s))))
    weighted = math.sqrt(float(np.sum(norm ** (n + s + 2 * sigma) * mag2)))
    return lattice * weighted / (math.pi * C)


# --------------------------------------------------------------------------
# Unbounded observable U^(-1/2)
# --------------------------------------------------------------------------


def inverse_sqrt_mean(U: Suspension, spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, bool]:
    """Torus integral of U^(-1/2) and whether it was judged divergent.

    Divergence is detected by the polar cubature: dyadic annuli around the
    minimizer whose contributions stop shrinking.
    """
    try:
        val = torus_integral(suspension_integrand(U, lambda u: u ** -0.5), spec)
    except DivergenceSuspectedError:
        return math.inf, True
    return float(val), False


def unbounded_target(gamma: float) -> tuple[str, float]:
    """Behaviour of the orbit average of U^(-1/2) for the A1 prototype of exponent gamma.

    Returns ("growth", tau) for gamma > 2, ("log", 1) at gamma = 2 and
    ("decay", tau) below, with the exponent of the corresponding bound.
    """
    g = float(gamma)
    if g > 2:
        a = (g - 2) * (3 * g - 2)
        return "growth", a / (a + 4 * g * g)
    if g == 2:
        return "log", 1.0
    if g >= 1:
        return "decay", 0.5 * (2 - g) / (2 + g)
    if g > 2.0 / 3.0:
        return "decay", g / (1 + g) * (2 - g) / (2 + g)
    if g == 2.0 / 3.0:
        return "decay", 0.2
    return "decay", 0.5 * g / (1 + g)


def unbounded_mean_experiment(P: Potential, T_grid=DEFAULT_T_GRID, spec: QuadratureSpec = DEFAULT_SPEC,
                              start: float | None = None) -> ErgodicReport:
    """Orbit averages of U(xi x)^(-1/2) and the matching rate fit.

    For the A2 prototype U vanishes at x = 0, so the averages run over
    [a, a + T] with a = 0.5.  Below gamma = 2 the window envelopes of the
    error to the torus integral are fitted as a power-law decay; at gamma = 2
    the averages are fitted against log T; above it their growth exponent is
    fitted.
    """
    U = P.suspension
    if U.kind not in (A1, A2):
        raise ValueError("the unbounded experiment needs a prototype suspension")
    gamma = float(U.gamma)
    if start is None:
        start = A2_OFFSET if U.kind == A2 else 0.0
    if U.kind == A2 and start <= 0:
        raise ValueError("A2 averages must start at a > 0")
    T_grid = np.asarray(T_grid, dtype=float)
    mean, divergent = inverse_sqrt_mean(U, spec)
    kind, tau = unbounded_target(gamma)
    f = lambda x: P.U(x) ** -0.5
    width = _width(P.frequency.vector)
    bp = P.orbit_zeros(start, start + float(T_grid.max()))
    tag = f"U^-1/2 {U.kind} gamma={gamma:g}"
    if kind == "decay" and not divergent:
        pts, slices = _window_points(T_grid, WINDOW_SAMPLES)
        C = running_integral(lambda x: f(x) - mean, start + pts, width, bp, spec, origin=start)
        dev = np.abs(C) / pts
        env = np.array([dev[s].max() for s in slices])
        vals = np.array([C[s][-1] for s in slices]) / T_grid + mean
        fit = fit_power_law(T_grid, env, decay=True, floor=ERROR_FLOOR)
        return ErgodicReport(tag, mean, divergent, fit, T_grid, vals, env, tau)
    C = running_integral(f, start + T_grid, width, bp, spec, origin=start)
    vals = C / T_grid
    if kind == "log":
        fit = fit_log_law(T_grid, vals)
    else:
        fit = fit_power_law(T_grid, vals, decay=False, floor=0.0)
    return ErgodicReport(tag, mean, divergent, fit, T_grid, vals, vals.copy(), tau)


# --------------------------------------------------------------------------
# epsilon-periods
# --------------------------------------------------------------------------


def _torus_sample(n: int, count: int, seed: int = 0) -> np.ndarray:
    """Stratified sample of T^n: one jittered point per cell of a regular grid."""
    side = max(2, int(round(count ** (1.0 / n))))
    rng = np.random.default_rng(seed)
    axes = np.meshgrid(*([np.arange(side)] * n), indexing="ij")
    cells = np.stack(axes, axis=-1).reshape(-1, n).astype(float)
    return (cells + rng.random(cells.shape)) / side


def _as_observable(f, xi):
    """Normalize (Potential | torus observable with xi | function of x) to a defect evaluator."""
    if isinstance(f, Potential):
        U = f.suspension
        return (lambda x: eval_suspension(U, x)), f.frequency.vector
    if xi is not None:
        return f, np.asarray(xi, dtype=float)
    return f, None


def shift_defects(f, shifts, xi=None, samples: int = 10_000, span: float = 1000.0,
                  seed: int = 0, block: int = 64) -> np.ndarray:
    """sup |f(x + l) - f(x)| over a dense sample, for each shift l.

    For a torus observable the supremum over the real line equals the
    supremum over the torus of |F(y + l xi) - F(y)|, so the sample is a
    stratified torus sample; for a plain function of x the sample is a
    stratified sample of [0, span].
    """
    F, vec = _as_observable(f, xi)
    shifts = np.asarray(shifts, dtype=float)
    out = np.empty(len(shifts))
    if vec is not None:
        y = _torus_sample(len(vec), samples, seed)
        base = np.asarray(F(y), dtype=float)
        for i in range(0, len(shifts), block):
            sh = shifts[i:i + block]
            moved = (y[None, :, :] + (sh[:, None] * vec)[:, None, :]) % 1.0
            out[i:i + block] = np.max(np.abs(np.asarray(F(moved), dtype=float) - base[None]), axis=1)
        return out
    rng = np.random.default_rng(seed)
    x = (np.arange(samples) + rng.random(samples)) * (span / samples)
    base = np.asarray(F(x), dtype=float)
    for i in range(0, len(shifts), block):
        sh = shifts[i:i + block]
        out[i:i + block] = np.max(np.abs(np.asarray(F(x[None] + sh[:, None]), dtype=float) - base[None]),
                                  axis=1)
    return out


def epsilon_period_search(f, eps: float, window: Sequence[float], xi=None, samples: int = 10_000,
                          margin: float = 0.0, seed: int = 0) -> float:
    """First integer shift l in [a, a + W] with sup |f(. + l) - f| < eps - margin.

    `margin` accounts for the gap between the sampled and the true supremum
    (e.g. a Lipschitz constant times the sample spacing).  Raises
    NotFoundError when no shift in the window qualifies.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    a, W = float(window[0]), float(window[1])
    if not W > 0:
        raise ValueError("window length must be positive")
    lo = max(1, math.ceil(a))
    hi = math.floor(a + W)
    block = 256
    for start in range(lo, hi + 1, block):
        cand = np.arange(start, min(hi, start + block - 1) + 1, dtype=float)
        d = shift_defects(f, cand, xi, samples, seed=seed)
        hit = np.nonzero(d < eps - margin)[0]
        if len(hit):
            return float(cand[hit[0]])
    raise NotFoundError(f"no {eps:g}-period among the integers of [{a:g}, {a + W:g}]")


def inclusion_lengths(f, eps_grid, xi=None, starts: int = 50, samples: int = 10_000,
                      spacing: float | None = None, cap: float = 1e6, seed: int = 0) -> np.ndarray:
    """Estimate l_eps as the longest wait from `starts` window origins to the next eps-period.

    Defects are computed once per integer shift and shared by all window
    origins; the scanned range doubles until every origin has found a period
    or `cap` is reached (then NotFoundError).
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    out = np.empty(len(eps_grid))
    cache: dict[int, float] = {}
    for j, eps in enumerate(eps_grid):
        step = spacing if spacing is not None else 2.0 / eps
        # irrational offsets keep origins off the integers
        origins = np.arange(starts) * step + (np.arange(starts) * 0.6180339887498949) % 1.0 + 0.5
        reach = float(origins[-1] + 4.0 / eps)
        while True:
            top = int(math.ceil(reach))
            need = [l for l in range(1, top + 1) if l not in cache]
            if need:
                d = shift_defects(f, np.array(need, dtype=float), xi, samples, seed=seed)
                cache.update(zip(need, d.tolist()))
            good = np.array([l for l in range(1, top + 1) if cache[l] < eps], dtype=float)
            idx = np.searchsorted(good, origins, side="right")
            if len(good) and np.all(idx < len(good)):
                out[j] = float(np.max(good[idx] - origins))
                break
            if reach >= cap:
                raise NotFoundError(f"no {eps:g}-period within {cap:g} of some window origin")
            reach = min(cap, 2.0 * reach)
    return out


def inclusion_length_fit(f, eps_grid, xi=None, starts: int = 50, samples: int = 10_000,
                         seed: int = 0) -> RateFit:
    """Fit log l_eps against log(1/eps); the slope estimates (n - 1)/alpha."""
    eps_grid = np.asarray(eps_grid, dtype=float)
    if len(eps_grid) < 5:
        raise ValueError("need at least five eps values")
    if np.any(np.diff(eps_grid) >= 0):
        raise ValueError("eps grid must be decreasing")
    lengths = inclusion_lengths(f, eps_grid, xi, starts, samples, seed=seed)
    return fit_power_law(1.0 / eps_grid, lengths, decay=False, floor=0.0)
