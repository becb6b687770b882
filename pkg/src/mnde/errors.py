"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class MndeError(Exception):
    """Base class for all package errors."""


class ShapeError(MndeError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(MndeError):
    """A computation produced NaN/Inf or is otherwise numerically invalid."""


class DataError(MndeError):
    """A dataset file or dataset operation is malformed."""


class ConfigError(MndeError):
    """A run configuration or checkpoint is invalid or inconsistent."""
