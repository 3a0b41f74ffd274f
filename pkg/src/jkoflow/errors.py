"""Exception types raised across the package."""

from __future__ import annotations


class JkoFlowError(Exception):
    """Base class for all package errors."""


class ZeroMass(JkoFlowError):
    pass


class GridMismatch(JkoFlowError):
    pass


class BadExponent(JkoFlowError):
    pass


class DimensionError(JkoFlowError):
    pass


class BadParameter(JkoFlowError):
    pass


class NumericalOverflow(JkoFlowError):
    pass


class NoConvergence(JkoFlowError):
    """Iterative solver stopped before reaching its tolerance.

    ``violation`` holds the last measured error (marginal violation,
    residual, or fixed-point change, depending on the solver).
    """

    def __init__(self, message: str, violation: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.violation = violation
        self.iterations = iterations


class FunctionalUnbounded(JkoFlowError):
    pass


class GridTooLarge(JkoFlowError):
    pass


class WrongModelClass(JkoFlowError):
    pass


class NonPositiveDensity(JkoFlowError):
    pass


class ParseError(JkoFlowError):
    """Scenario file could not be parsed or failed validation."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column
