"""Exception types shared across the package."""


class ZeroNormError(ValueError):
    """Raised when an embedding row has zero Euclidean norm."""

    def __init__(self, row: int):
        super().__init__(f"zero-norm row {row}")
        self.row = row


class DimensionMismatchError(ValueError):
    pass


class DegenerateInterSimilarityError(ValueError):
    pass


class DumpFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    """A loss or metric went non-finite during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DegenerateInputWarning(UserWarning):
    pass
