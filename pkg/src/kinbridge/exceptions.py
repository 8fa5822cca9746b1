"""Exception types shared across the package."""


class KinbridgeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KinbridgeError):
    """Malformed user input: degenerate ranges, bad counts, unknown keys."""


class DomainError(KinbridgeError):
    """Mathematically invalid argument (negative density, non-PSD matrix...)."""


class TruncationError(KinbridgeError):
    """The grid box is too small for the requested quadrature accuracy."""


class InfeasibilityError(KinbridgeError):
    """A structural assumption fails; carries a diagnostic deficit."""

    def __init__(self, message, deficit=None):
        super().__init__(message)
        self.deficit = deficit


class DegenerateKernelError(KinbridgeError):
    """Transition covariance numerically singular (time too small)."""


class PropagationAccuracyError(KinbridgeError):
    """Semigroup propagation lost more mass than the tolerated drift."""


class CertificateError(KinbridgeError):
    """A claimed contraction certificate is violated beyond tolerance."""


class InconsistencyError(KinbridgeError):
    """Quantities that must agree (e.g. marginal mass vs potentials) do not."""
