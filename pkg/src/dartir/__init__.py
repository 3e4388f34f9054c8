"""Desk-scale image restoration with windowed, banded-sparse, channel and
spatial attention, trained end to end through a from-scratch float64
autodiff core."""

from .errors import (
    CheckpointError,
    ConfigError,
    DartError,
    NumericsError,
    PnmError,
    ShapeError,
)
from .model import DartConfig, DartModel
from .tensor import GradTape, Tensor

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DartError",
    "NumericsError",
    "PnmError",
    "ShapeError",
    "DartConfig",
    "DartModel",
    "GradTape",
    "Tensor",
]

__version__ = "0.1.0"
