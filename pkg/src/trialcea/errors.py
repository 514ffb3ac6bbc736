"""Exception types shared across the package."""


class TrialCeaError(Exception):
    """Base class for all package errors."""


class DataError(TrialCeaError):
    """Invalid or inconsistent input data (bad file, bad column, bad value)."""


class ModelError(TrialCeaError):
    """Model definition or estimation failure."""


class RankDeficiencyError(ModelError):
    """The fixed-effect design is not identifiable on the observed rows."""


class ConvergenceError(ModelError):
    """The optimizer did not meet its convergence criteria.

    The best state reached is attached as ``result`` so callers can inspect
    where the fit stalled.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
