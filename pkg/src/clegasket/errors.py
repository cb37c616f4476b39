"""Error types shared across the package."""

__all__ = [
    "InvalidLevelError",
    "InvalidParameterError",
    "UnsupportedParameterError",
    "FormatError",
    "ResolutionError",
    "MarginError",
    "MissingBoundaryError",
    "AccuracyWarning",
]


class InvalidLevelError(ValueError):
    """Level out of range for the operation."""


class InvalidParameterError(ValueError):
    """Parameter outside its documented domain."""


class UnsupportedParameterError(ValueError):
    """Parameter in a regime the implementation does not cover."""


class FormatError(ValueError):
    """Corrupt or unrecognized binary payload."""


class ResolutionError(ValueError):
    """Query level too fine for the representation backing it."""


class MarginError(ValueError):
    """Representation does not cover the margin an operation needs."""


class MissingBoundaryError(ValueError):
    """Operation requires an open boundary ring the configuration lacks."""


class AccuracyWarning(UserWarning):
    """Result computed below the recommended accuracy settings."""
