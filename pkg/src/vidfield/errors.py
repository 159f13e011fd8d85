"""Exception hierarchy shared across the package."""


class VidfieldError(Exception):
    """Base class for all vidfield errors."""


class ShapeError(VidfieldError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(VidfieldError):
    """A computation produced NaN or Inf, which is an error state."""


class FormatError(VidfieldError):
    """A file or byte stream does not conform to its documented layout."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class VersionError(FormatError):
    """File declares a format version this build does not understand."""


class DivergenceError(VidfieldError):
    """Optimization produced a non-finite loss."""

    def __init__(self, step: int, last_finite_loss: float):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"loss became non-finite at step {step}; "
            f"last finite loss was {last_finite_loss:.6g}"
        )


class BudgetError(VidfieldError):
    """Parameter budgets of compared representations differ too much."""
