class DepthPatchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DepthPatchError, ValueError):
    pass


class DataError(DepthPatchError, ValueError):
    pass


class NumericError(DepthPatchError, ArithmeticError):
    pass
