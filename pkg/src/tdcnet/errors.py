"""Exception hierarchy. Each family maps to one CLI exit code."""


class TDCNetError(Exception):
    exit_code = 1


class ConfigError(TDCNetError, ValueError):
    exit_code = 2


class CheckpointError(ConfigError):
    pass


class DataError(TDCNetError):
    exit_code = 3


class LoadError(DataError, FileNotFoundError):
    pass


class FormatError(DataError, ValueError):
    pass


class BatchError(DataError, ValueError):
    pass


class ShapeError(TDCNetError, ValueError):
    exit_code = 2


class LossError(TDCNetError, ValueError):
    exit_code = 4


class MetricError(DataError, ValueError):
    pass


class NumericError(TDCNetError, ArithmeticError):
    exit_code = 4
