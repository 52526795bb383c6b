"""Exception types shared across the package."""


class ScaletuneError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(ScaletuneError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigurationError(ScaletuneError, ValueError):
    """A configuration value (bit width, schedule bound, dtype, ...) is invalid."""


class DomainError(ScaletuneError, ValueError):
    """A scalar argument lies outside its documented domain."""


class ContractError(ScaletuneError, RuntimeError):
    """A runtime precondition was violated by the caller."""


class NumericError(ScaletuneError, ArithmeticError):
    """An operation produced non-finite values."""


class CorruptionError(ScaletuneError, RuntimeError):
    """A serialized artifact is malformed; the message names the byte offset."""


class MigrationError(CorruptionError):
    """A container was written with a format version this build cannot read."""
