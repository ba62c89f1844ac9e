"""Exception hierarchy shared across the package.

CLI exit-code mapping: ValidationError and subclasses -> 2, NumericError -> 3.
"""


class MirrorFillError(Exception):
    """Base class for all package errors."""


class ValidationError(MirrorFillError):
    """Bad argument values or violated preconditions."""


class DimensionError(ValidationError):
    """Shape or size mismatch between arrays."""


class DomainError(ValidationError):
    """Query outside the valid domain (e.g. out-of-bounds point)."""


class FormatError(ValidationError):
    """Malformed file content; carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MirrorFillError):
    """Non-finite values or numerically invalid state."""


class TrainingDiverged(MirrorFillError):
    """A training-loop guard tripped (loss blow-up or discriminator collapse)."""
