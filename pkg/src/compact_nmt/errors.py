"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An object is not in the state an operation requires."""


class NumericError(ArithmeticError):
    """A computation produced or was given a non-finite or degenerate value."""


class LengthError(ValueError):
    """A sequence is empty or longer than allowed."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class ConfigError(ValueError):
    """A configuration value is out of range."""


class FormatError(ValueError):
    """A binary file is corrupt or of an unsupported version."""


class CompatibilityError(ValueError):
    """An offset file does not belong to the baseline it is applied to."""
