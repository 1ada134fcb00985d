"""Minimal float64 tensor engine with reverse-mode autodiff."""

from . import functional, kernels, nn
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import ConfigError
from .tensor import DTYPE, ShapeError, Tensor, concat, no_grad, tensor, zeros

__all__ = [
    "DTYPE",
    "ConfigError",
    "ShapeError",
    "Tensor",
    "concat",
    "functional",
    "kernels",
    "load_checkpoint",
    "nn",
    "no_grad",
    "save_checkpoint",
    "tensor",
    "zeros",
]
