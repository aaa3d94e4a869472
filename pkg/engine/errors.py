"""
Exception hierarchy shared by every stage of the pipeline.

main.py maps these onto exit codes (2 config, 3 data, 4 run failure).
"""


class MimicError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(MimicError, ValueError):
    """Tensor dimensions do not line up."""


class NonFiniteError(MimicError, FloatingPointError):
    """NaN or Inf produced by a forward or backward pass."""


class ArchParseError(MimicError, ValueError):
    """Architecture string does not follow the grammar."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class BudgetError(MimicError, ValueError):
    """No architecture satisfies the parameter budget, or a width is unresolved."""


class BoundsError(MimicError, ValueError):
    """A width or hyperparameter lies outside its allowed range."""


class DataError(MimicError, IOError):
    """Missing, truncated or corrupt data file."""


class CheckpointError(DataError):
    """Checkpoint file has the wrong magic, version or layout."""


class FingerprintMismatch(MimicError, ValueError):
    """Transfer set was generated by a different ensemble."""


class SpaceMismatch(MimicError, ValueError):
    """Ledger was written for a different hyperparameter space."""


class TrainingDiverged(MimicError, RuntimeError):
    """Loss or gradients became non-finite; carries the last good result."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
