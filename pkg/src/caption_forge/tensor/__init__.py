"""Minimal float64 tensor kernels with a recorded-graph backward pass."""

from .autograd import Node, Tape, UnsupportedOperationError
from .ops import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    affine,
    batch_norm,
    conv2d,
    global_avg_pool,
    relu,
    sigmoid,
)
from .optim import sgd_step
from .serialize import load_checkpoint, load_tensor, save_checkpoint, save_tensor

__all__ = [
    "BatchNormParams",
    "ConvParams",
    "Node",
    "ShapeError",
    "Tape",
    "UnsupportedOperationError",
    "affine",
    "batch_norm",
    "conv2d",
    "global_avg_pool",
    "load_checkpoint",
    "load_tensor",
    "relu",
    "save_checkpoint",
    "save_tensor",
    "sgd_step",
    "sigmoid",
]
