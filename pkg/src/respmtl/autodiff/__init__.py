"""Minimal reverse-mode autodiff over numpy arrays."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .losses import (AllMasked, ClassIndexOutOfRange, EmptyClass, NameSetMismatch, class_weights,
                     l2_pairwise_reg, weighted_cross_entropy)
from .nn import LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import (AutodiffError, AxisOutOfRange, DetachedLoss, NonScalarLoss, Parameter, ShapeMismatch,
                     Tape, Tensor, add, backward, broadcast_to, concat, gelu, layer_norm, log_softmax, matmul,
                     mean, mul, no_grad, pick, reshape, softmax, square, sub, sum_, take, transpose)

__all__ = [
    "Adam", "AdamState", "AllMasked", "AutodiffError", "AxisOutOfRange", "CheckpointError",
    "ClassIndexOutOfRange", "DetachedLoss", "EmptyClass", "GradCheckReport", "LayerNorm", "Linear",
    "Module", "NameSetMismatch", "NonScalarLoss", "Parameter", "ShapeMismatch", "Tape", "Tensor",
    "adam_step", "add", "backward", "broadcast_to", "class_weights", "concat", "gelu", "grad_check",
    "l2_pairwise_reg", "layer_norm", "load_checkpoint", "log_softmax", "matmul", "mean", "mul", "no_grad", "pick",
    "reshape", "save_checkpoint", "softmax", "square", "sub", "sum_", "take", "transpose",
    "weighted_cross_entropy",
]
