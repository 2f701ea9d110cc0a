"""Exception hierarchy.

Validation problems subclass ``ValueError`` so callers can treat them as bad
input; numerical failures carry the location at which they were detected.
"""


class PpdeError(Exception):
    """Base class for all package errors."""


class ValidationError(PpdeError, ValueError):
    """Bad input: shapes, grids, ranges, unresolved names."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class GridError(ValidationError):
    pass


class AdaptednessError(ValidationError):
    pass


class ControlBoundError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class NumericalError(PpdeError, ArithmeticError):
    """Non-finite values produced mid-computation."""

    def __init__(self, message, path_index=None, step=None):
        super().__init__(message)
        self.path_index = path_index
        self.step = step


class RegressionError(NumericalError):
    def __init__(self, message, condition=None, step=None):
        super().__init__(message, step=step)
        self.condition = condition


class NoContactError(PpdeError):
    """No pre-horizon contact between a Snell envelope and its obstacle."""
