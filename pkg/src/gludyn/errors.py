"""Exception types shared across the package."""


class GludynError(Exception):
    """Base class for package errors."""


class StateValidityError(GludynError):
    """A physiological state contained non-finite or otherwise invalid values."""


class DivergenceError(GludynError):
    """Numerical integration produced a non-finite component."""

    def __init__(self, component: str, message: str = ""):
        self.component = component
        super().__init__(message or f"simulator diverged in component {component!r}")


class InitializationError(GludynError):
    """Steady-state initialization failed; parameters likely need review."""


class FitError(GludynError):
    """Model fitting aborted (e.g. too many non-finite gradient steps)."""


class ForecastError(GludynError):
    """Forecast could not be produced (e.g. too many rejected samples)."""


class UndefinedMetricError(GludynError):
    """A metric is undefined for the given inputs (e.g. no comparable pairs)."""


class ConfigError(GludynError):
    """Run configuration failed validation."""
