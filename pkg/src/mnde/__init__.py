"""Multi-view neural differential equations for long-term traffic forecasting."""

from .errors import ConfigError, DataError, MndeError, NumericsError, ShapeError

__all__ = [
    "ConfigError",
    "DataError",
    "MndeError",
    "NumericsError",
    "ShapeError",
]

__version__ = "0.1.0"
