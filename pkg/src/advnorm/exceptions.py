"""Exception hierarchy shared by all advnorm modules."""


class AdvNormError(Exception):
    """Base class for every error raised by advnorm."""


class ValidationError(AdvNormError, ValueError):
    """Input violates a documented invariant or precondition."""


class FormatError(ValidationError):
    """File does not follow the .mvol container layout."""


class CorruptionError(FormatError):
    """Container header and payload disagree."""


class DegenerateInputError(ValidationError):
    """Input is well formed but numerically degenerate (e.g. zero variance)."""


class ShapeError(ValidationError):
    """Tensor shape incompatible with a network architecture."""


class DivergenceError(AdvNormError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
