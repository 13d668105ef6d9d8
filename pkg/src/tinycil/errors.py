"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, double backward, ...)."""


class ConfigError(ValueError):
    """A configuration violates a module precondition."""


class DataFormatError(ValueError):
    """An on-disk file is malformed (bad magic, truncation, bad labels)."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became NaN; carries the step/epoch/batch position."""

    def __init__(self, message: str, step: int | None = None,
                 epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.batch = batch
