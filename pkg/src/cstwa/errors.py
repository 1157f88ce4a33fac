"""Exception hierarchy. Each class maps to one CLI exit code."""


class CstwaError(Exception):
    exit_code = 1


class ConfigError(CstwaError, ValueError):
    exit_code = 1


class ShapeError(CstwaError, ValueError):
    exit_code = 1


class DataError(CstwaError, ValueError):
    exit_code = 2


class MetricError(DataError):
    """Raised when a metric is undefined for the given labels (e.g. one class only)."""


class NumericError(CstwaError, FloatingPointError):
    exit_code = 3
