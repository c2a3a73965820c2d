"""Exception hierarchy shared by all modules.

The CLI maps ``ContractViolation`` / ``RejectedInput`` to exit code 2 and
``FormatError`` / ``OSError`` to exit code 3.
"""


class AvsdfError(Exception):
    """Base class for all package errors."""


class ContractViolation(AvsdfError, ValueError):
    """A caller broke an operation's precondition (shapes, counts, dispatch)."""


class RejectedInput(AvsdfError, ValueError):
    """Input data is invalid, e.g. contains NaN or Inf."""


class FormatError(AvsdfError):
    """A binary file is malformed: bad magic, version, or truncated payload."""


class DimensionMismatch(FormatError):
    pass


class NonRigidTransform(FormatError):
    pass


class ArchitectureMismatch(AvsdfError):
    """A checkpoint does not match the requested model architecture."""


class TrainingDiverged(AvsdfError):
    def __init__(self, message, step=None, detail=None):
        super().__init__(message)
        self.step = step
        self.detail = detail or {}
