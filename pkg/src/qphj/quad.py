"""Quadrature on the torus and along orbits x -> xi x.

Line integrals use a vectorized adaptive Gauss-Kronrod (7/15) scheme: every
panel that misses its share of the tolerance is bisected, and all panels of a
sweep are evaluated in one array call.  Torus integrals are computed in polar
coordinates centred at a (possibly singular) point c: the unit square around c
is split into eight angular sectors, the part outside radius rho is integrated
by adaptive tensor Gauss-Kronrod cubature, and the disk |x - c| < rho by dyadic
annuli.  For a power-type singularity the annulus contributions form an
asymptotically geometric sequence; its ratio decides convergence and supplies a
tail correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceSuspectedError, QuadratureError, SingularIntervalError
from .torus import A1, A2, Potential, Suspension, eval_suspension

_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])

NODES = np.concatenate([-_XGK[:-1], [0.0], _XGK[-2::-1]])
WK = np.concatenate([_WGK[:-1], [_WGK[-1]], _WGK[-2::-1]])
WG = np.zeros(15)
WG[[1, 3, 5]] = _WG[:3]
WG[7] = _WG[3]
WG[[13, 11, 9]] = _WG[:3]

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_subdivisions: int = 400_000
    polar_refinement_radius: float = 0.15

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be at least 1")
        if not 0 < self.polar_refinement_radius < 0.5:
            raise ValueError("polar_refinement_radius must lie in (0, 0.5)")


DEFAULT_SPEC = QuadratureSpec()


# --------------------------------------------------------------------------
# Adaptive Gauss-Kronrod on the line
# --------------------------------------------------------------------------


def _as_components(y: np.ndarray, m: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return y.reshape(1, m, 15)
    return y.reshape(y.shape[0], m, 15)


def gauss_kronrod(f, a: np.ndarray, b: np.ndarray):
    """Kronrod values, QUADPACK-style error estimates and rounding-noise floors.

    f maps a flat array of abscissae to values (shape (m,) or (k, m)).
    Returns three arrays of shape (k, len(a)).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = 0.5 * (a + b)
    h = 0.5 * (b - a)
    x = c[:, None] + h[:, None] * NODES[None, :]
    y = _as_components(f(x.ravel()), len(a))
    kron = (y @ WK) * h
    gauss = (y @ WG) * h
    resabs = (np.abs(y) @ WK) * np.abs(h)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(h != 0, kron / (2.0 * h), 0.0)
        resasc = (np.abs(y - mean[..., None]) @ WK) * np.abs(h)
        err = np.abs(kron - gauss)
        scaled = resasc * np.minimum(1.0, (200.0 * err / resasc) ** 1.5)
        err = np.where((resasc > 0) & (err > 0), scaled, err)
    err = np.maximum(err, 50.0 * _EPS * resabs)
    # Abscissae far from the origin carry an absolute rounding error of order
    # eps |x|; for sharply peaked integrands this bounds the attainable accuracy.
    reach = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(invalid="ignore", divide="ignore"):
        noise = np.where(h != 0, 8.0 * _EPS * reach / np.abs(h), 0.0) * resasc
    return kron, err, noise


@dataclass
class LinePanels:
    """Accepted panels of an adaptive line integration, sorted by position."""

    left: np.ndarray
    right: np.ndarray
    values: np.ndarray  # (k, m)
    errors: np.ndarray  # (k, m)

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=1)

    @property
    def error(self) -> np.ndarray:
        return self.errors.sum(axis=1)


def adaptive_panels(f, edges, abs_tol: float, rel_tol: float, max_subdivisions: int) -> LinePanels:
    """Adaptive GK15 over consecutive panels given by `edges`.

    A panel is accepted when, in every component, its error estimate is below
    max(abs_tol * width / total_width, rel_tol * |value|), so the summed error
    is bounded by abs_tol + rel_tol * sum |values|.
    """
    edges = np.asarray(edges, dtype=float)
    a = edges[:-1]
    b = edges[1:]
    span = abs(edges[-1] - edges[0])
    if span == 0:
        probe = _as_components(f(np.zeros(15)), 1)
        k = probe.shape[0]
        return LinePanels(np.empty(0), np.empty(0), np.zeros((k, 0)), np.zeros((k, 0)))
    out_a, out_b, out_v, out_e = [], [], [], []
    splits = 0
    while len(a):
        kron, err, noise = gauss_kronrod(f, a, b)
        width = np.abs(b - a)
        tol = np.maximum(np.maximum(abs_tol * width / span, rel_tol * np.abs(kron)), noise)
        ok = np.all(err <= tol, axis=0)
        tiny = width <= 64 * _EPS * np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        if np.any(tiny & ~ok & ~np.all(np.isfinite(kron), axis=0)):
            raise QuadratureError("non-finite integrand values on an unsplittable panel")
        ok |= tiny
        out_a.append(a[ok])
        out_b.append(b[ok])
        out_v.append(kron[:, ok])
        out_e.append(err[:, ok])
        bad = ~ok
        nbad = int(bad.sum())
        if nbad == 0:
            break
        splits += nbad
        if splits > max_subdivisions:
            v = sum(x.sum(axis=1) for x in out_v) + kron[:, bad].sum(axis=1)
            e = sum(x.sum(axis=1) for x in out_e) + err[:, bad].sum(axis=1)
            raise QuadratureError("adaptive line quadrature exceeded max_subdivisions",
                                  value=v, error=e)
        mid = 0.5 * (a[bad] + b[bad])
        a = np.concatenate([a[bad], mid])
        b = np.concatenate([mid, b[bad]])
    left = np.concatenate(out_a)
    order = np.argsort(left, kind="stable")
    return LinePanels(left[order], np.concatenate(out_b)[order],
                      np.concatenate(out_v, axis=1)[:, order],
                      np.concatenate(out_e, axis=1)[:, order])


def integrate(f, a: float, b: float, spec: QuadratureSpec = DEFAULT_SPEC,
              breakpoints=(), panel: float | None = None) -> float:
    """Scalar adaptive integral of f over [a, b] (a > b flips the sign)."""
    if a == b:
        return 0.0
    sign = 1.0
    if a > b:
        a, b, sign = b, a, -1.0
    edges = panel_edges(a, b, panel if panel is not None else (b - a), breakpoints)
    res = adaptive_panels(f, edges, spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
    return sign * float(res.total[0])


def panel_edges(a: float, b: float, width: float, breakpoints=()) -> np.ndarray:
    count = max(1, int(np.ceil((b - a) / width - 1e-12)))
    edges = np.linspace(a, b, count + 1)
    bp = np.asarray(breakpoints, dtype=float)
    bp = bp[(bp > a) & (bp < b)]
    if len(bp):
        edges = np.unique(np.concatenate([edges, bp]))
        # drop slivers that only cost evaluations
        keep = np.concatenate([[True], np.diff(edges) > 1e-14 * max(1.0, abs(b)), ])
        keep[-1] = True
        edges = edges[keep]
    return edges


def orbit_panel_width(P: Potential) -> float:
    return min(0.25, 1.0 / P.frequency.norm)


def orbit_edges(P: Potential, a: float, b: float) -> np.ndarray:
    """Panels of width min(0.25, 1/|xi|) plus closest-approach breakpoints."""
    return panel_edges(a, b, orbit_panel_width(P), P.orbit_zeros(a, b))


def line_integral_sqrt(P: Potential, mu: float, a: float, b: float,
                       spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Integral of sqrt(2 (mu + U(xi x))) over [a, b] (oriented)."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if a == b:
        return 0.0
    lo, hi = min(a, b), max(a, b)
    res = adaptive_panels(lambda x: np.sqrt(2.0 * (mu + P.U(x))), orbit_edges(P, lo, hi),
                          spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
    val = float(res.total[0])
    return val if b > a else -val


def _check_time_kernel(P: Potential, r: float, lo: float, hi: float) -> None:
    probe = np.concatenate([[lo, hi], P.orbit_zeros(lo, hi)])
    vals = r + P.U(probe)
    if np.any(vals <= 0.0):
        where = probe[np.argmin(vals)]
        raise SingularIntervalError(
            f"r - V vanishes at x = {where:.6g}; the time-of-flight integrand has a pole")


def line_integral_inv_sqrt(P: Potential, r: float, a: float, b: float,
                           spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Time of flight: integral of 1 / sqrt(2 (r + U(xi x))) over [a, b] (oriented)."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    if a == b:
        return 0.0
    lo, hi = min(a, b), max(a, b)
    _check_time_kernel(P, r, lo, hi)
    res = adaptive_panels(lambda x: 1.0 / np.sqrt(2.0 * (r + P.U(x))), orbit_edges(P, lo, hi),
                          spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
    val = float(res.total[0])
    if not np.isfinite(val):
        raise SingularIntervalError("time-of-flight integral is not finite")
    return val if b > a else -val


def cumulative_integral(f, points, width: float, breakpoints=(), spec: QuadratureSpec = DEFAULT_SPEC,
                        origin: float = 0.0) -> np.ndarray:
    """Oriented integrals of f from `origin` to every entry of `points`.

    All points become panel edges of one adaptive pass per side of the origin,
    so differences between returned values are integrals over shared panels.
    """
    pts = np.asarray(points, dtype=float)
    out = np.zeros(pts.shape)
    flat = pts.ravel()
    res = np.zeros(flat.shape)
    for sign in (1.0, -1.0):
        side = sign * (flat - origin) > 0
        if not np.any(side):
            continue
        far = float(np.max(sign * (flat[side] - origin)))
        bp = np.asarray(breakpoints, dtype=float)
        bp = sign * (bp - origin)
        # integrate in the reflected variable u = sign * (x - origin) >= 0
        g = (lambda u, s=sign: f(origin + s * u))
        targets = sign * (flat[side] - origin)
        edges = panel_edges(0.0, far, width, np.concatenate([bp, targets]))
        panels = adaptive_panels(g, edges, spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
        acc = np.concatenate([[0.0], np.cumsum(panels.values[0])])
        stops = np.concatenate([[0.0], panels.right])
        idx = np.searchsorted(stops, targets)
        idx = np.minimum(idx, len(stops) - 1)
        # targets are edges, so they coincide with some panel endpoint
        miss = np.abs(stops[idx] - targets) > 1e-12 * np.maximum(1.0, targets)
        if np.any(miss):
            alt = np.clip(idx - 1, 0, len(stops) - 1)
            idx = np.where(miss & (np.abs(stops[alt] - targets) < np.abs(stops[idx] - targets)), alt, idx)
        res[side] = sign * acc[idx]
    out[...] = res.reshape(pts.shape)
    return out


def running_integral(f, points, width: float, breakpoints=(), spec: QuadratureSpec = DEFAULT_SPEC,
                     origin: float = 0.0, chunk: int = 8192) -> np.ndarray:
    """Integrals of f from `origin` to every point (all >= origin), in bounded memory.

    The interval is processed in consecutive stretches of `chunk` panels so
    very long orbits never hold more than one stretch of nodes at a time.
    """
    pts = np.asarray(points, dtype=float)
    if np.any(pts < origin):
        raise ValueError("points must not precede the origin")
    order = np.argsort(pts, kind="stable")
    targets = pts[order]
    out = np.zeros(len(targets))
    if len(targets) == 0:
        return out.reshape(pts.shape)
    bp = np.asarray(breakpoints, dtype=float)
    far = float(targets[-1])
    step = chunk * width
    lo, acc, k = origin, 0.0, 0
    while lo < far:
        hi = min(far, lo + step)
        inside = targets[k:][targets[k:] <= hi]
        edges = panel_edges(lo, hi, width, np.concatenate([bp[(bp > lo) & (bp < hi)], inside]))
        panels = adaptive_panels(f, edges, spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
        csum = acc + np.concatenate([[0.0], np.cumsum(panels.values[0])])
        stops = np.concatenate([[lo], panels.right])
        idx = np.clip(np.searchsorted(stops, inside - 1e-12 * max(1.0, abs(hi))), 0, len(stops) - 1)
        out[k:k + len(inside)] = csum[idx]
        k += len(inside)
        acc = float(csum[-1])
        lo = hi
    res = np.empty(len(targets))
    res[order] = out
    return res.reshape(pts.shape)


def orbit_cumulative_sqrt(P: Potential, mu: float, points, spec: QuadratureSpec = DEFAULT_SPEC) -> np.ndarray:
    """w(x) = oriented integral of sqrt(2 (mu + U(xi s))) from 0 to x, at many points."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros(pts.shape)
    lo = min(0.0, float(pts.min()))
    hi = max(0.0, float(pts.max()))
    return cumulative_integral(lambda x: np.sqrt(2.0 * (mu + P.U(x))), pts, orbit_panel_width(P),
                               P.orbit_zeros(lo, hi), spec)


def orbit_integral(F, xi, a: float, b: float, spec: QuadratureSpec = DEFAULT_SPEC,
                   breakpoints=()) -> float:
    """Integral of F(xi x) over [a, b] for a torus observable F (points of shape (..., n))."""
    xi = np.asarray(xi, dtype=float)
    width = min(0.25, 1.0 / np.linalg.norm(xi))
    if a == b:
        return 0.0
    lo, hi = min(a, b), max(a, b)
    res = adaptive_panels(lambda x: F(x[:, None] * xi), panel_edges(lo, hi, width, breakpoints),
                          spec.abs_tol, spec.rel_tol, spec.max_subdivisions)
    val = float(res.total[0])
    return val if b > a else -val


# --------------------------------------------------------------------------
# Torus cubature in polar coordinates
# --------------------------------------------------------------------------


class OffsetIntegrand:
    """Integrand given as a function of the offset h from a centre point.

    Evaluating through offsets keeps relative accuracy when |h| is far below
    the spacing of floating-point numbers near the centre.
    """

    def __init__(self, func, center):
        self.func = func
        self.center = tuple(float(c) for c in center)

    def at_offset(self, h):
        return self.func(h)


def suspension_offset_values(U: Suspension, h: np.ndarray) -> np.ndarray:
    """U(x0 + h) evaluated from the offset h, exact to rounding for prototypes."""
    h = np.asarray(h, dtype=float)
    if U.kind in (A1, A2):
        hh = h - np.round(h)
        s1 = np.sin(np.pi * hh[..., 0])
        s2 = np.sin(np.pi * hh[..., 1])
        base = 2.0 * (s1 * s1 + s2 * s2)
        return base if U.gamma == 1.0 else base**U.gamma
    return eval_suspension(U, np.asarray(U.minimizer) + h)


def suspension_integrand(U: Suspension, transform) -> OffsetIntegrand:
    """Integrand transform(U(x)) centred at the minimizer of U."""
    return OffsetIntegrand(lambda h: transform(suspension_offset_values(U, h)), U.minimizer)


def _rmax(theta: np.ndarray) -> np.ndarray:
    return 0.5 / np.maximum(np.abs(np.cos(theta)), np.abs(np.sin(theta)))


@dataclass
class _Rects:
    ta: np.ndarray
    tb: np.ndarray
    sa: np.ndarray
    sb: np.ndarray
    rin: np.ndarray
    rout: np.ndarray  # nan marks the boundary of the unit square around the centre
    tag: np.ndarray   # region index (annulus number, -1 for the outer region)

    def take(self, mask):
        return _Rects(*(getattr(self, k)[mask] for k in ("ta", "tb", "sa", "sb", "rin", "rout", "tag")))

    def __len__(self):
        return len(self.ta)

    @staticmethod
    def concat(parts):
        return _Rects(*(np.concatenate([getattr(p, k) for p in parts])
                        for k in ("ta", "tb", "sa", "sb", "rin", "rout", "tag")))


def _rect_geometry(R: _Rects):
    tc = 0.5 * (R.ta + R.tb)
    th = 0.5 * (R.tb - R.ta)
    sc = 0.5 * (R.sa + R.sb)
    sh = 0.5 * (R.sb - R.sa)
    T = tc[:, None] + th[:, None] * NODES[None, :]          # (m, 15)
    S = sc[:, None] + sh[:, None] * NODES[None, :]          # (m, 15)
    rout = np.where(np.isnan(R.rout)[:, None], _rmax(T), R.rout[:, None])
    depth = rout - R.rin[:, None]                           # (m, 15)
    rad = R.rin[:, None, None] + S[:, None, :] * depth[:, :, None]   # (m, 15, 15)
    jac = rad * depth[:, :, None]
    h = np.stack([rad * np.cos(T)[:, :, None], rad * np.sin(T)[:, :, None]], axis=-1)
    return h, jac * (th * sh)[:, None, None]


def _eval_offsets(f, h, center):
    flat = h.reshape(-1, 2)
    if hasattr(f, "at_offset"):
        y = f.at_offset(flat)
    else:
        pts = np.asarray(center) + flat
        y = f(pts - np.floor(pts))
    y = np.asarray(y, dtype=float)
    m = h.shape[0]
    return y.reshape(1, m, 15, 15) if y.ndim == 1 else y.reshape(y.shape[0], m, 15, 15)


def _rect_eval(f, R: _Rects, center):
    h, jac = _rect_geometry(R)
    y = _eval_offsets(f, h, center) * jac[None]
    kk = np.einsum("kmij,i,j->km", y, WK, WK)
    gk = np.einsum("kmij,i,j->km", y, WG, WK)
    kg = np.einsum("kmij,i,j->km", y, WK, WG)
    err_t = np.abs(kk - gk)
    err_s = np.abs(kk - kg)
    absval = np.einsum("kmij,i,j->km", np.abs(y), WK, WK)
    area = np.einsum("mij,i,j->m", np.abs(jac), WK, WK)
    err = np.maximum(err_t + err_s, 50 * _EPS * absval)
    return kk, err, err_t, err_s, area


def _split(R: _Rects, along_theta: np.ndarray) -> _Rects:
    tm = 0.5 * (R.ta + R.tb)
    sm = 0.5 * (R.sa + R.sb)
    at = along_theta
    first = _Rects(R.ta, np.where(at, tm, R.tb), R.sa, np.where(at, R.sb, sm), R.rin, R.rout, R.tag)
    second = _Rects(np.where(at, tm, R.ta), R.tb, np.where(at, R.sa, sm), R.sb, R.rin, R.rout, R.tag)
    return _Rects.concat([first, second])


def _adaptive_cubature(f, R: _Rects, center, abs_tol, rel_tol, total_area, max_subdivisions,
                       keep_rects=False):
    """Adaptive tensor GK15 on polar rectangles; returns per-tag sums (k, tags)."""
    done_v, done_e, done_tag, kept = [], [], [], []
    splits = 0
    while len(R):
        kk, err, err_t, err_s, area = _rect_eval(f, R, center)
        tol = np.maximum(abs_tol * area / total_area, rel_tol * np.abs(kk))
        ok = np.all(err <= tol, axis=0)
        tiny = (np.abs(R.tb - R.ta) < 1e-13) | (np.abs(R.sb - R.sa) < 1e-13)
        if np.any(~ok & tiny & ~np.all(np.isfinite(kk), axis=0)):
            raise DivergenceSuspectedError("non-finite integrand values during cubature")
        ok |= tiny
        done_v.append(kk[:, ok])
        done_e.append(err[:, ok])
        done_tag.append(R.tag[ok])
        if keep_rects:
            kept.append(R.take(ok))
        bad = ~ok
        nbad = int(bad.sum())
        if nbad == 0:
            break
        splits += nbad
        if splits > max_subdivisions:
            v = sum(x.sum() for x in done_v) + kk[:, bad].sum()
            raise QuadratureError("torus cubature exceeded max_subdivisions", value=float(v))
        # split along the direction that limits the worst component
        with np.errstate(divide="ignore", invalid="ignore"):
            worst = np.argmax(err[:, bad] / tol[:, bad], axis=0)
        cols = np.arange(nbad)
        along = err_t[:, bad][worst, cols] >= err_s[:, bad][worst, cols]
        R = _split(R.take(bad), along)
    return (np.concatenate(done_v, axis=1), np.concatenate(done_e, axis=1),
            np.concatenate(done_tag), (_Rects.concat(kept) if keep_rects else None))


def _outer_rects(rho: float) -> _Rects:
    edges = np.arange(9) * (np.pi / 4)
    m = 8
    return _Rects(edges[:-1], edges[1:], np.zeros(m), np.ones(m), np.full(m, rho),
                  np.full(m, np.nan), np.full(m, -1))


def _annulus_rects(rho: float, first: int, count: int, sectors: int = 4) -> _Rects:
    j = np.repeat(np.arange(first, first + count), sectors)
    k = np.tile(np.arange(sectors), count)
    width = 2 * np.pi / sectors
    return _Rects(k * width, (k + 1) * width, np.zeros(len(j)), np.ones(len(j)),
                  rho * 2.0 ** (-(j + 1.0)), rho * 2.0 ** (-j.astype(float)), j)


@dataclass(frozen=True)
class TorusResult:
    value: float
    error: float
    annuli: tuple[float, ...]


MAX_DOUBLINGS = 64
STALL_RATIO = 0.9
STALL_RUN = 6


def torus_integral(f, spec: QuadratureSpec = DEFAULT_SPEC, center=None,
                   detect_divergence: bool = True, full_output: bool = False):
    """Integral of f over T^2, with polar refinement around `center`.

    f is either a callable on torus points of shape (..., 2) or an
    OffsetIntegrand (whose own centre is then used).  With detect_divergence,
    six consecutive dyadic annuli whose contributions fail to shrink by 10%
    raise DivergenceSuspectedError carrying the partial sums.
    """
    if hasattr(f, "at_offset"):
        center = f.center
    if center is None:
        center = (0.0, 0.0)
    rho = spec.polar_refinement_radius
    vals, errs, _, _ = _adaptive_cubature(f, _outer_rects(rho), center, spec.abs_tol, spec.rel_tol,
                                          1.0, spec.max_subdivisions)
    outer = float(vals[0].sum())
    error = float(errs[0].sum())
    annuli: list[float] = []
    partial = [outer]
    j = 0
    block = 8
    tail = 0.0
    run = 0
    converged = False
    while j < MAX_DOUBLINGS and not converged:
        R = _annulus_rects(rho, j, block)
        v, e, tag, _ = _adaptive_cubature(f, R, center, spec.abs_tol, spec.rel_tol, 1.0,
                                          spec.max_subdivisions)
        inc = np.bincount(tag - j, weights=v[0], minlength=block)
        inc_err = np.bincount(tag - j, weights=e[0], minlength=block)
        for a, ea in zip(inc, inc_err):
            if not np.isfinite(a):
                raise DivergenceSuspectedError("non-finite annulus contribution", partial)
            prev = annuli[-1] if annuli else None
            annuli.append(float(a))
            partial.append(partial[-1] + float(a))
            error += float(ea)
            j += 1
            if prev is not None and prev != 0.0:
                q = abs(a / prev)
                run = run + 1 if q >= STALL_RATIO else 0
                if detect_divergence and run >= STALL_RUN:
                    raise DivergenceSuspectedError(
                        f"annulus contributions stopped decaying near radius {rho * 2.0**-j:.3e}",
                        partial)
                if q < STALL_RATIO:
                    tail = a * q / (1.0 - q)
                    target = max(spec.abs_tol, spec.rel_tol * abs(partial[-1]))
                    if abs(tail) <= 0.1 * target:
                        converged = True
                        break
            elif prev == 0.0 and a == 0.0:
                tail = 0.0
                converged = True
                break
    value = partial[-1] + tail
    error += abs(tail) if converged else abs(tail) + abs(annuli[-1] if annuli else 0.0)
    if full_output:
        return TorusResult(value, error, tuple(annuli))
    return value


@dataclass(frozen=True)
class PolarRule:
    """Fixed cubature rule on T^2 expressed through offsets from a centre."""

    center: tuple[float, float]
    offsets: np.ndarray   # (N, 2)
    weights: np.ndarray   # (N,)
    inner_radius: float

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weights


def build_polar_rule(f, center, spec: QuadratureSpec = DEFAULT_SPEC,
                     inner_radius: float = 1e-20, sectors: int = 4) -> PolarRule:
    """Freeze the adaptive mesh of a (vector-valued) integrand into a reusable rule.

    The mesh is refined until every component of f meets the tolerance, so any
    integrand that is dominated by and varies no faster than the components is
    integrated accurately by the frozen nodes.  The disk |h| < inner_radius is
    omitted.
    """
    rho = spec.polar_refinement_radius
    count = int(np.ceil(np.log2(rho / inner_radius)))
    R = _Rects.concat([_outer_rects(rho), _annulus_rects(rho, 0, count, sectors)])
    _, _, _, rects = _adaptive_cubature(f, R, center, spec.abs_tol, spec.rel_tol, 1.0,
                                        spec.max_subdivisions, keep_rects=True)
    h, jac = _rect_geometry(rects)
    w = jac * (WK[:, None] * WK[None, :])[None]
    return PolarRule(tuple(center), h.reshape(-1, 2), w.ravel(), rho * 2.0**-count)


# --------------------------------------------------------------------------
# Sobolev norms from truncated Fourier data
# --------------------------------------------------------------------------


def fourier_coefficients(f, N: int, dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """DFT coefficients of f on an N^dim grid and the matching integer modes."""
    if N < 4 or N & (N - 1):
        raise ValueError("N must be a power of two")
    axes = [np.arange(N) / N] * dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = np.asarray(f(pts), dtype=float)
    coef = np.fft.fftn(vals) / N**dim
    freqs = np.fft.fftfreq(N, d=1.0 / N)
    modes = np.stack(np.meshgrid(*([freqs] * dim), indexing="ij"), axis=-1)
    return coef, modes


def sobolev_norm(U, s: float, N: int = 256, integrand: str = "sqrt") -> float:
    """Truncated H^s norm (sum (1 + |k|^2)^s |f_k|^2)^(1/2) for modes |k|_inf <= N/2.

    The coefficients come from a DFT on a 2N grid, which keeps aliasing far
    below the change between successive N.

    U is a Suspension (integrand "sqrt" for sqrt(U), "value" for U) or any
    callable on torus points.
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    if N < 64:
        raise ValueError("N must be at least 64")
    if isinstance(U, Suspension):
        if integrand == "sqrt":
            func = lambda x: np.sqrt(eval_suspension(U, x))
        elif integrand == "value":
            func = lambda x: eval_suspension(U, x)
        else:
            raise ValueError(f"unknown integrand {integrand!r}")
        dim = U.dim
    else:
        func, dim = U, 2
    # sample on a twice finer grid so the retained coefficients are not aliased
    coef, modes = fourier_coefficients(func, 2 * N, dim)
    keep = np.all(np.abs(modes) <= N // 2, axis=-1)
    k2 = np.sum(modes[keep] ** 2, axis=-1)
    return float(np.sqrt(np.sum((1.0 + k2) ** s * np.abs(coef[keep]) ** 2)))
