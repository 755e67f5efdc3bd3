"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric failures exit 3, stale teacher caches exit 4.
"""


class NsddError(Exception):
    exit_code = 1


class ConfigError(NsddError):
    exit_code = 2


class ParameterError(ConfigError, ValueError):
    pass


class DimensionError(NsddError, ValueError):
    exit_code = 2


class ShapeError(DimensionError):
    pass


class FormatError(NsddError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    pass


class NumericError(NsddError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class StateError(NsddError, RuntimeError):
    pass


class StaleCacheError(NsddError):
    exit_code = 4
