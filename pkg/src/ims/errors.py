"""Exception types shared across the package.

Plain argument problems raise :class:`ValueError`; the classes below cover
failures callers may want to catch specifically.
"""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's shape rule."""


class TapeError(RuntimeError):
    """Backward was requested on a detached or already-consumed graph."""


class PoisonedGradientError(FloatingPointError):
    """An optimizer received a non-finite gradient."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class IdxError(Exception):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    def __init__(self, path, expected: int, found: int):
        super().__init__(
            f"{path}: bad magic number 0x{found:08X}, expected 0x{expected:08X}"
        )
        self.expected = expected
        self.found = found


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
