"""Minimal neural-network substrate: numpy autodiff, layers, Adam."""
from .nets import (Conv1d, Dense, GroupNorm, Mish, Module, Sequential, SiLU,
                   sinusoidal_embedding)
from .optim import Adam, sharded_loss_and_grads
from .tensor import Tensor, concat, repeat_upsample

__all__ = [
    "Tensor", "concat", "repeat_upsample",
    "Module", "Dense", "Conv1d", "GroupNorm", "SiLU", "Mish", "Sequential",
    "sinusoidal_embedding",
    "Adam", "sharded_loss_and_grads",
]
