"""Minimal dense reverse-mode autodiff on numpy float64 arrays."""
from . import ops
from .optim import Adam
from .tensor import (
    ContractError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    current_tape,
    no_grad,
)

__all__ = [
    "Adam",
    "ContractError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "current_tape",
    "no_grad",
    "ops",
]
