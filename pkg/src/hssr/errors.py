"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument value is outside its legal range."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class FormatError(ValueError):
    """A file's contents do not match its declared layout."""


class TrainingError(RuntimeError):
    """Optimization failed in a way that cannot be recovered."""
