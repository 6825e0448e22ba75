"""Bayesian multivariate functional dynamic linear models."""
__version__ = "0.1.0"

from .basis import KnotSequence, SplineBasis, place_knots  # noqa: E402
from .dataset import FunctionalDataset, SynthSpec, generate_synthetic, load_long_csv, write_long_csv  # noqa: E402
from .errors import ConfigError, DataError, DomainError, NumericalError  # noqa: E402

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "FunctionalDataset",
    "KnotSequence",
    "NumericalError",
    "SplineBasis",
    "SynthSpec",
    "__version__",
    "generate_synthetic",
    "load_long_csv",
    "place_knots",
    "write_long_csv",
]
