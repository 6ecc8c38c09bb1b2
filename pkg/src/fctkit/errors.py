"""Exception hierarchy shared by every fctkit module."""


class FCTError(Exception):
    """Base class for all fctkit errors."""


class ShapeError(FCTError, ValueError):
    """Array dimensions do not agree with what an operation expects."""


class StateError(FCTError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DegenerateInputError(FCTError, ValueError):
    """Input is valid in shape but mathematically degenerate."""


class NumericError(FCTError, ArithmeticError):
    """Non-finite values reached a numeric routine."""


class ConfigError(FCTError, ValueError):
    """Invalid configuration value or combination."""


class CorruptionError(FCTError, ValueError):
    """A persisted file failed validation (magic, version, length or CRC)."""


class VersionError(FCTError, ValueError):
    """Gallery model-version bookkeeping was violated."""
