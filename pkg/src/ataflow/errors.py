class DomainError(ValueError):
    """Argument outside the domain of a density or transform."""


class InsufficientDataError(ValueError):
    """Too few usable samples for an estimator."""


class UsageError(ValueError):
    """Invalid configuration or arguments."""


class NumericAbort(RuntimeError):
    """Training stopped after repeated non-finite losses."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
