"""Minimal float64 reverse-mode autodiff on top of numpy."""
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import BatchNorm1d, Linear, Module, ModuleList, Parameter
from .optim import Adam, adam_step, clip_grad_norm, step_decay_lr
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    batchnorm1d,
    concat,
    exp,
    get_tape,
    log,
    log_softmax,
    logsumexp,
    matmul,
    no_grad,
    relu,
    reset_tape,
    sigmoid,
    softmax,
    swish,
    tanh,
    where,
)

__all__ = [
    "Adam",
    "BatchNorm1d",
    "Linear",
    "Module",
    "ModuleList",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "batchnorm1d",
    "clip_grad_norm",
    "concat",
    "exp",
    "get_tape",
    "load_checkpoint",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "no_grad",
    "relu",
    "reset_tape",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "step_decay_lr",
    "swish",
    "tanh",
    "where",
]
