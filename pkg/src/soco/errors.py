"""Exception types shared across the package."""


class SocoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SocoError, ValueError):
    """An argument violates an operation's preconditions."""


class NumericError(SocoError, ArithmeticError):
    """A computation produced NaN/Inf or hit a zero norm."""


class FormatError(SocoError, ValueError):
    """A checkpoint or cache file is corrupt or has an unexpected layout."""


class ConfigError(SocoError, ValueError):
    """A run configuration is malformed or contains unknown keys."""
