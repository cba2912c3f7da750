"""Exception types shared across the package."""


class BubbleBlochError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(BubbleBlochError):
    """Invalid cell or inclusion geometry (containment, degenerate axes, ...)."""


class ResonanceError(BubbleBlochError):
    """A reciprocal-lattice denominator k^2 - |2 pi n + alpha|^2 is numerically singular.

    Carries the offending integer vector so callers can report which mode
    resonates with the requested wavenumber.
    """

    def __init__(self, message: str, n=None):
        super().__init__(message)
        self.n = n


class ConditioningError(BubbleBlochError):
    """A dense boundary-operator solve hit an unacceptable condition estimate."""


class ConvergenceError(BubbleBlochError):
    """An iterative search (eigenvalue bracketing, refinement) failed to converge."""


class ConfigError(BubbleBlochError):
    """A run configuration file is missing keys or contains invalid values."""
