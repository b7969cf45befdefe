"""Language-adaptive weight generation for box+mask grounding, desk scale."""

from .errors import (
    ConfigError,
    DataError,
    LawgroundError,
    NumericError,
    ShapeError,
    TapeError,
)
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ConfigError",
    "DataError",
    "LawgroundError",
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
