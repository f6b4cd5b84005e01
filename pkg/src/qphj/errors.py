"""Exception types shared across the package."""

from __future__ import annotations


class QPHJError(Exception):
    """Base class for all package errors."""


class ResonantFrequencyError(QPHJError):
    """An integer relation xi . k ~ 0 was detected."""

    def __init__(self, kappa, value):
        self.kappa = tuple(int(k) for k in kappa)
        self.value = float(value)
        super().__init__(f"resonant frequency: |xi . {self.kappa}| = {self.value:.3e}")


class InvalidSuspensionError(QPHJError):
    """A suspension takes negative values or is otherwise malformed."""


class DivergenceSuspectedError(QPHJError):
    """Quadrature partial sums keep growing; the integral is probably infinite."""

    def __init__(self, message, partial_sums=()):
        self.partial_sums = tuple(float(s) for s in partial_sums)
        super().__init__(message)


class QuadratureError(QPHJError):
    """Adaptive quadrature ran out of subdivisions without meeting tolerance."""

    def __init__(self, message, value=float("nan"), error=float("nan")):
        self.value = value
        self.error = error
        super().__init__(message)


class SingularIntervalError(QPHJError):
    """The time-of-flight integrand has a pole on the requested interval."""


class OutOfTableError(QPHJError):
    """A query exceeds the tabulated range of an effective model."""


class HypothesisFailedError(QPHJError):
    """The hypotheses of a quantitative estimate are not satisfied."""


class StationaryError(QPHJError):
    """The characteristic is an equilibrium and never moves."""


class NotFoundError(QPHJError):
    """A search window contained no admissible candidate."""


class ConfigError(QPHJError):
    """Invalid experiment configuration."""
