"""
Exception types shared across the s2me package.

Each error also derives from the builtin it refines, so callers that only
know about ValueError / FileNotFoundError keep working.
"""


class S2MEError(Exception):
    """Base class for all s2me errors"""


class ShapeError(S2MEError, ValueError):
    """Operand shapes do not satisfy an operator's contract"""


class ConfigError(S2MEError, ValueError):
    """Invalid or conflicting configuration"""


class TensorFileError(S2MEError, ValueError):
    """Malformed S2TF container"""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(S2MEError, ValueError):
    """Checkpoint cannot be written or does not match the requested run"""


class MissingCheckpointError(S2MEError, FileNotFoundError):
    """No checkpoint found where one was expected"""


class TrainingDiverged(S2MEError, RuntimeError):
    """Loss became non-finite during training"""


class GradCheckError(S2MEError, ArithmeticError):
    """Function under gradient check is not finite"""
