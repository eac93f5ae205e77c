"""Minimal reverse-mode autodiff: tensors, layers, losses, optimizers, checkpoints."""

from .core import (Tape, Tensor, absolute, as_tensor, concat, conv2d, exp, lgamma, log,
                   log_softmax, matmul, max_pool2d, no_grad, relu, sigmoid, softmax, stack,
                   tanh)
from .layers import (Activation, Affine, Conv2D, Dropout, GRUCell, MaxPool2D, Module, Parameter,
                     Sequential, Softmax, forward_backward, l2_penalty, mse_loss, parameter_count)
from .optim import SGD, Adam, AdamState, adam_step, clip_grad_norm
from .checkpoint import load_parameters, save_parameters

__all__ = [
    "Tape", "Tensor", "absolute", "as_tensor", "concat", "conv2d", "exp", "lgamma", "log",
    "log_softmax", "matmul", "max_pool2d", "no_grad", "relu", "sigmoid", "softmax", "stack", "tanh",
    "Activation", "Affine", "Conv2D", "Dropout", "GRUCell", "MaxPool2D", "Module", "Parameter",
    "Sequential", "Softmax", "forward_backward", "l2_penalty", "mse_loss", "parameter_count",
    "SGD", "Adam", "AdamState", "adam_step", "clip_grad_norm", "load_parameters", "save_parameters",
]
