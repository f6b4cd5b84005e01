"""Least-squares rate fits on transformed axes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POWER = "power-law"
LOG = "log-law"
RECIPROCAL_LOG = "reciprocal-log"

FLAT = "flat"
SATURATED = "saturated"


@dataclass(frozen=True)
class RateFit:
    """Result of a linear regression on transformed axes.

    For the power law the fit is log y = log_constant + slope * log x and
    `exponent` is the rate with the sign convention of the experiment
    (decay fits report -slope).  For the log law y = log_constant + slope * log x
    and for the reciprocal-log law y = log_constant + slope / |log x|; there
    `exponent` is the slope itself.
    """

    exponent: float
    log_constant: float
    r_squared: float
    model: str
    sample_count: int
    flag: str | None = None

    def __post_init__(self):
        if self.flag is None and self.sample_count < 2:
            raise ValueError("a fit needs at least two samples")


def _linear(u: np.ndarray, v: np.ndarray) -> tuple[float, float, float]:
    A = np.vstack([u, np.ones_like(u)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - (slope * u + icpt)
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(min(max(r2, 0.0), 1.0))


def _degenerate(model: str, count: int, flag: str) -> RateFit:
    return RateFit(float("nan"), float("nan"), 0.0, model, count, flag)


def fit_power_law(x, y, decay: bool = True, floor: float = 1e-12) -> RateFit:
    """Fit y ~ C x^(-rate) (decay) or y ~ C x^rate (growth).

    Samples with y below `floor` are dropped; if all are below it the fit is
    flagged flat, if fewer than four remain it is flagged saturated.
    """
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    good = y > floor
    if not np.any(good):
        return _degenerate(POWER, len(x), FLAT)
    if good.sum() < 4:
        return _degenerate(POWER, int(good.sum()), SATURATED)
    slope, icpt, r2 = _linear(np.log(x[good]), np.log(y[good]))
    flag = None if good.all() else SATURATED
    return RateFit(-slope if decay else slope, icpt, r2, POWER, int(good.sum()), flag)


def fit_log_law(x, y) -> RateFit:
    """Fit y ~ a log x + b."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, icpt, r2 = _linear(np.log(x), y)
    return RateFit(slope, icpt, r2, LOG, len(x))


def fit_reciprocal_log(x, y) -> RateFit:
    """Fit y ~ a / |log x| + b."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, icpt, r2 = _linear(1.0 / np.abs(np.log(x)), y)
    return RateFit(slope, icpt, r2, RECIPROCAL_LOG, len(x))


def geometric_grid(start: float, stop: float, count: int) -> np.ndarray:
    return np.geomspace(start, stop, count)
