"""Reverse-mode differentiation, layers and first-order optimisation."""

from . import functional
from .nn import BatchNorm2d, Conv2d, Linear, Module, parameter
from .optim import Adam, AdamState, adam_step, cosine_lr
from .rng import SeededRNG, seeded_rng
from .tensor import NonFiniteError, Tape, TapeError, Tensor, backward, current_tape

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "Linear", "Module", "NonFiniteError",
    "SeededRNG", "Tape", "TapeError", "Tensor", "adam_step", "backward", "cosine_lr",
    "current_tape", "functional", "parameter", "seeded_rng",
]
