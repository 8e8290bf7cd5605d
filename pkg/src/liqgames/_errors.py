"""Exception types shared across the package."""


class LiqGamesError(Exception):
    """Base class for all package errors."""


class DimensionError(LiqGamesError):
    """Mismatched or invalid array dimensions."""


class ParameterError(LiqGamesError):
    """Model parameters violate a documented precondition."""


class IntegratorError(LiqGamesError):
    """A numerical integrator produced non-finite values."""


class SolverError(LiqGamesError):
    """An iterative solver failed to converge.

    The ``diagnostics`` attribute, when set, carries residual traces or
    iteration counts useful for post-mortems.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BasisError(LiqGamesError):
    """Regression basis is rank deficient or otherwise unusable."""


class ConfigError(LiqGamesError):
    """Scenario configuration failed to parse or validate."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = violations or []
