"""Exception hierarchy shared by all modules."""


class EnkfLabError(Exception):
    """Base class for errors raised by enkf_lab."""


class ConfigurationError(EnkfLabError):
    """Model or experiment configuration is invalid (e.g. non-SPD noise covariance)."""


class UsageError(EnkfLabError, ValueError):
    """An operation was called with arguments outside its contract."""


class TruncationError(EnkfLabError):
    """Too much probability mass reached the edge of a truncated grid."""

    def __init__(self, message, boundary_mass=None, step=None):
        super().__init__(message)
        self.boundary_mass = boundary_mass
        self.step = step


class OutOfRangeError(EnkfLabError):
    """A datum lies outside the grid it must be located on."""


class DegenerateLikelihoodError(EnkfLabError):
    """All likelihood weights underflowed; the conditioning denominator vanished."""


class DegenerateGainError(EnkfLabError):
    """Observation-space covariance is singular or too ill-conditioned to invert."""


class DegenerateMeasureError(EnkfLabError):
    """A measure has singular covariance where an SPD one is required."""


class InternalError(EnkfLabError):
    """A guarded invariant failed; indicates a bug rather than bad input."""
