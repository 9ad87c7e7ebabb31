"""Dense tensors, neural-net primitives and reverse-mode gradients."""
from coherdiff.numcore.gradcheck import grad_check, grad_errors
from coherdiff.numcore.io import load_tensors, save_tensors
from coherdiff.numcore.layout import resize_nearest
from coherdiff.numcore.nn import Conv2d, GroupNorm, Linear, Module, parameter
from coherdiff.numcore.ops import (
    add, attention, avg_pool2d, concat, conv2d, div, embedding, exp, gate_add, getitem,
    group_norm, log, matmul, mean, mse, mul, neg, pad2d, power, relu, reshape,
    sigmoid, silu, softmax, square, stack, sub, sum, tanh, transpose,
    upsample_nearest2d,
)
from coherdiff.numcore.tensor import GradTape, Tensor, as_tensor, default_dtype, precision

__all__ = [
    "GradTape", "Tensor", "as_tensor", "default_dtype", "precision",
    "Module", "Linear", "Conv2d", "GroupNorm", "parameter",
    "add", "attention", "sub", "mul", "div", "neg", "power", "square", "exp", "log", "tanh",
    "sigmoid", "relu", "silu", "gate_add", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "stack", "pad2d", "matmul", "softmax", "conv2d",
    "avg_pool2d", "upsample_nearest2d", "group_norm", "embedding", "mse",
    "resize_nearest", "grad_check", "grad_errors", "save_tensors", "load_tensors",
]
