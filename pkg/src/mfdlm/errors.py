"""Exception types shared across the package (mapped to CLI exit codes)."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Invalid fit or simulation configuration."""


class NumericalError(ArithmeticError):
    """A decomposition or recursion broke down numerically."""


class DomainError(ValueError):
    """Evaluation point outside the spline domain."""
