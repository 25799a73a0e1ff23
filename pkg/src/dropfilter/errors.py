"""Exception types raised across the package."""


class DropFilterError(Exception):
    pass


class ShapeError(DropFilterError, ValueError):
    pass


class SizeError(DropFilterError, ValueError):
    pass


class ParameterError(DropFilterError, ValueError):
    pass


class DataError(DropFilterError, ValueError):
    pass


class FormatError(DropFilterError, ValueError):
    pass


class ConfigError(DropFilterError, ValueError):
    pass


class NumericError(DropFilterError, ArithmeticError):
    pass
