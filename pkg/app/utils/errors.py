"""
Exception hierarchy shared by the app.vision modules.

Everything a caller can fix by changing inputs is also a ValueError, which the
CLI maps to exit code 1.
"""


class VisError(Exception):
    """Base class for errors raised by the app.vision modules."""


class ShapeError(VisError, ValueError):
    """Tensor or grid geometry violates a module contract."""


class ContractError(VisError, ValueError):
    """A precondition of an operation does not hold."""


class FormatError(VisError, ValueError):
    """An on-disk artifact is malformed."""


class CheckpointError(FormatError):
    """Checkpoint archive is truncated, corrupt or from another version."""


class TrainingError(VisError, RuntimeError):
    """Training produced a non-finite loss."""
