"""Supervised contrastive pretraining on multi-domain image banks, in NumPy."""

from .errors import (
    DegenerateInputError,
    FormatError,
    MdsupconError,
    NumericalError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
)
from .losses import CEBatch, SupConBatch, cross_entropy, supcon_loss

__version__ = "0.1.0"

__all__ = [
    "CEBatch",
    "DegenerateInputError",
    "FormatError",
    "MdsupconError",
    "NumericalError",
    "ShapeError",
    "SupConBatch",
    "TruncatedFileError",
    "ValidationError",
    "cross_entropy",
    "supcon_loss",
]
