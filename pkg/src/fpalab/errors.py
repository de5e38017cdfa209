"""Exception types shared across the package."""


class FPALabError(Exception):
    """Base class for every error raised by fpalab."""


class DimensionError(FPALabError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(FPALabError, ValueError):
    """A call violated an operation's preconditions (e.g. non-scalar loss)."""


class TapeStateError(FPALabError, RuntimeError):
    """The recorded tape was already consumed by a previous backward pass."""


class ConfigError(FPALabError, ValueError):
    """Invalid configuration value."""


class FormatError(FPALabError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvariantError(FPALabError, AssertionError):
    """An internal invariant (budget, range, bijectivity) was violated."""


class TrainingError(FPALabError, RuntimeError):
    """Training diverged; ``last_good`` holds the last finite parameter set."""

    def __init__(self, message: str, last_good=None, epoch: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
