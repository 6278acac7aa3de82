"""Exception types shared across the package."""


class CandleError(Exception):
    """Base class for every error raised by this package."""


class InvalidShape(CandleError, ValueError):
    pass


class ShapeMismatch(CandleError, ValueError):
    pass


class NonFiniteValue(CandleError, ValueError):
    pass


class InvalidLabel(CandleError, ValueError):
    pass


class CorruptData(CandleError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidRatio(CandleError, ValueError):
    pass


class ContractViolation(CandleError, RuntimeError):
    pass


class NonFiniteLoss(CandleError, FloatingPointError):
    pass


class MissingTensor(CandleError, KeyError):
    pass


class ConfigError(CandleError, ValueError):
    """Invalid or unknown configuration key/value."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
