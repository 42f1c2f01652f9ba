"""Exception hierarchy shared across the package."""


class DynChanError(Exception):
    """Base class for all package errors."""


class ShapeError(DynChanError, ValueError):
    """An op received inputs whose shapes are incompatible."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class GraphError(DynChanError, RuntimeError):
    pass


class NumericError(DynChanError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DescriptorError(DynChanError, ValueError):
    pass


class ConstraintError(DynChanError, ValueError):
    """A channel mask would violate the per-layer floor or cardinality rules."""


class ConfigError(DynChanError, ValueError):
    pass


class ParseError(DynChanError, ValueError):
    """Malformed input file. ``location`` is a byte offset or a line number."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class UnsupportedArchitecture(DynChanError, ValueError):
    pass
