"""Exception hierarchy shared by all qmimo modules.

Every error raised by the library derives from :class:`QmimoError` so callers
can catch library failures with a single handler while still distinguishing
the semantic categories below.
"""

from __future__ import annotations


class QmimoError(Exception):
    """Base class for all library errors."""


class DomainError(QmimoError, ValueError):
    """An argument is outside the mathematical domain of an operation
    (non-finite input, probability outside (0,1), nonpositive scale, ...)."""


class ShapeError(QmimoError, ValueError):
    """Array dimensions do not agree with the operation's contract."""


class ConfigError(QmimoError, ValueError):
    """A configuration object or file is invalid."""


class DegenerateIntervalError(DomainError):
    """A truncation interval carries numerically zero probability mass.

    Attributes:
        midpoint: suggested clamp value (interval midpoint) for callers that
            want to continue instead of failing.
    """

    def __init__(self, message: str, midpoint: float | None = None):
        super().__init__(message)
        self.midpoint = midpoint


class DegenerateThresholdError(DomainError):
    """Threshold configuration collapses two quantization boundaries."""


class DegenerateEstimateError(QmimoError):
    """Closed-form estimate is undefined for the observed frequencies."""


class SingularInformationError(QmimoError):
    """Information matrix is numerically singular; the bound is unbounded
    in at least one direction.

    Attributes:
        null_direction: unit vector spanning the (approximate) null space.
    """

    def __init__(self, message: str, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class SingularPilotError(QmimoError):
    """Pilot matrix is rank deficient; least-squares init is undefined."""


class IdentifiabilityError(QmimoError):
    """The likelihood has no interior maximum (e.g. all outcomes saturated),
    so the noise scale cannot be identified."""


class UnsupportedConfigError(ConfigError):
    """A structurally valid configuration exceeds an enforced capability cap
    (e.g. candidate enumeration too large)."""


class PreconditionError(QmimoError):
    """An operation's stated precondition does not hold for these inputs.

    Attributes:
        diagnostic: optional scalar diagnostic explaining the refusal.
    """

    def __init__(self, message: str, diagnostic: float | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic


class InsufficientSamplesError(QmimoError):
    """A Monte Carlo average was requested with too few samples under
    strict mode."""
