"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """Non-finite values were produced during an iterative computation.

    ``step`` is the 1-based iteration (or layer) index at which values first
    became non-finite, when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(ValueError):
    """An on-disk container (dataset or checkpoint) is incomplete or corrupt."""


class TrainingDivergedError(RuntimeError):
    """Validation loss became non-finite during training.

    ``history`` holds the recorded loss curve up to the failure so the run can
    be inspected.
    """

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history
