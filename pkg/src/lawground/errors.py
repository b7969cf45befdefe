"""Typed errors shared across the package.

Library code raises these instead of aborting; the CLI maps them to exit
codes (config -> 2, numeric -> 3).
"""


class LawgroundError(Exception):
    pass


class ShapeError(LawgroundError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(LawgroundError, ArithmeticError):
    """A computation produced or would produce non-finite values."""


class TapeError(LawgroundError, RuntimeError):
    """Misuse of the gradient tape (double backward, detached graph, ...)."""


class DataError(LawgroundError, ValueError):
    """Malformed dataset files or invalid sample inputs."""


class ConfigError(LawgroundError, ValueError):
    """Invalid configuration file or option combination."""
