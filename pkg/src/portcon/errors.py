"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for configuration problems, 2 for data problems, 3 for numerical ones.
"""

from __future__ import annotations


class PortconError(Exception):
    exit_code = 3


class ConfigError(PortconError, ValueError):
    exit_code = 1


class ParameterError(ConfigError):
    """An argument is outside the range an operation accepts."""


class DataError(PortconError, ValueError):
    exit_code = 2


class SchemaError(DataError):
    pass


class OrderingError(DataError):
    pass


class DuplicationError(DataError):
    pass


class WarmupError(DataError):
    """Not enough history before the requested date."""


class ComputationError(PortconError, ArithmeticError):
    exit_code = 3


class EstimationError(ComputationError):
    pass


class DegenerateError(ComputationError):
    """Input has no usable cross-sectional or temporal variation."""


class RescalingError(ComputationError):
    pass
