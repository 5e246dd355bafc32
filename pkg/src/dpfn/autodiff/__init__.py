"""A small reverse-mode automatic differentiation engine on top of numpy."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import (
    BiLSTM,
    Conv1d,
    ConvTranspose1d,
    LayerNorm,
    Linear,
    LSTM,
    Module,
    Parameter,
    PReLU,
)
from .optim import Adam, clip_grad_norm
from .tensor import Tensor, debug_mode, is_grad_enabled, matmul, no_grad

__all__ = [
    "Adam",
    "BiLSTM",
    "CheckpointError",
    "Conv1d",
    "ConvTranspose1d",
    "LSTM",
    "LayerNorm",
    "Linear",
    "Module",
    "PReLU",
    "Parameter",
    "Tensor",
    "check_gradients",
    "clip_grad_norm",
    "debug_mode",
    "functional",
    "is_grad_enabled",
    "load_checkpoint",
    "matmul",
    "no_grad",
    "numerical_grad",
    "relative_error",
    "save_checkpoint",
]
