"""Exception types shared across the package."""


class InverseFormError(Exception):
    """Base class for every error raised by this package."""


class ContractError(InverseFormError, ValueError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError):
    """Array shapes do not conform for the requested operation."""


class NumericError(InverseFormError, ArithmeticError):
    """Non-finite input or output."""


class SingularityError(NumericError):
    """A transform is not invertible (|det| <= 1e-9)."""


class DegenerateSpectrumError(NumericError):
    """Singular values too close together to differentiate through an SVD."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None, components=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.components = components or {}


class EmptyDatasetError(InverseFormError, ValueError):
    """No informative tiles were available."""


class FormatError(InverseFormError, ValueError):
    """A binary artifact is corrupt, truncated or inconsistent."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
