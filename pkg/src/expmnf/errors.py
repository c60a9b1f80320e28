"""Shared exception types."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one was required.

    ``where`` identifies the offending component/sample when known.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DataValidationError(ValueError):
    """Input data violates a documented precondition (targets, weights, schema)."""


class InfeasibleTargetError(RuntimeError):
    """A privacy target cannot be met within the search bracket."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
