"""Small reverse-mode automatic differentiation engine on numpy arrays."""

from . import functional
from .nn import BatchNorm1d, Conv1d, Linear, Module, SNLinear
from .optim import Adam, PlateauScheduler, adam_step, clip_grad_norm, scheduler_step
from .tensor import ShapeError, Tensor, concat, no_grad, split

__all__ = [
    "Adam",
    "BatchNorm1d",
    "Conv1d",
    "Linear",
    "Module",
    "PlateauScheduler",
    "SNLinear",
    "ShapeError",
    "Tensor",
    "adam_step",
    "clip_grad_norm",
    "concat",
    "functional",
    "no_grad",
    "scheduler_step",
    "split",
]
