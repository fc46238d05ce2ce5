"""Minimal float64 tensor library with tape-based reverse-mode autodiff."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ops import (
    add,
    cross_entropy,
    embedding_lookup,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    tanh,
    transpose,
)
from .optim import AdamState, adam_step, linear_warmup
from .tensor import ComputationTape, NumericalError, Tensor, backward, no_grad

__all__ = [
    "AdamState",
    "CheckpointError",
    "ComputationTape",
    "NumericalError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "cross_entropy",
    "embedding_lookup",
    "gelu",
    "getitem",
    "layer_norm",
    "linear_warmup",
    "load_checkpoint",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "ops",
    "reshape",
    "save_checkpoint",
    "scale",
    "softmax",
    "tanh",
    "transpose",
]
