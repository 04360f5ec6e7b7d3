"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible. The message names both operands."""


class NumericError(ArithmeticError):
    """Non-finite values, diverging optimization, or unrecoverable numerics."""


class DegenerateSpectrumError(NumericError):
    """Singular-value gap fell below the guard threshold.

    Carries the offending index pair so callers can decide to reperturb.
    """

    def __init__(self, message, pair=None, gap=None, guard=None):
        super().__init__(message)
        self.pair = pair
        self.gap = gap
        self.guard = guard


class ConfigError(ValueError):
    """Config or plan file could not be parsed. Carries the line number."""

    def __init__(self, message, line_no=None, path=None):
        if line_no is not None:
            message = f"{path or '<config>'}:{line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no
        self.path = path


class PlanError(ValueError):
    """Compression plan references an unknown or protected layer."""
