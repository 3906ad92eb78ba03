class ShapeError(ValueError):
    """Raised when tensor shapes disagree with each other or with a ModelShape."""


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN/Inf or hits an undefined case."""


class TensorFormatError(ValueError):
    """Raised for malformed tensor dumps (bad magic, version, truncation)."""


class CheckpointError(ValueError):
    """Raised for unreadable gate checkpoints."""


class CheckpointVersionError(CheckpointError):
    pass
