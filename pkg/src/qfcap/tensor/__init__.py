from .engine import (
    DTYPE, Tensor, add, as_tensor, backward, concat, cross_entropy, div, embedding, exp, gelu,
    getitem, grad_enabled, l2_normalize, layer_norm, linear, log, log_softmax, matmul, mean,
    mse, mul, neg, no_grad, parameter, power, reshape, softmax, sqrt, stack, stop_gradient, sub,
    tanh, token_logprobs, topological_order, transpose, tsum, zero_grads,
)
from .gradcheck import GradCheckReport, gradient_check
from .optim import AdamState, adam_step, clip_grad_norm, global_grad_norm

__all__ = [
    "DTYPE", "Tensor", "add", "as_tensor", "backward", "concat", "cross_entropy", "div",
    "embedding", "exp", "gelu", "getitem", "grad_enabled", "l2_normalize", "layer_norm", "linear",
    "log", "log_softmax", "matmul", "mean", "mse", "mul", "neg", "no_grad", "parameter", "power",
    "reshape", "softmax", "sqrt", "stack", "stop_gradient", "sub", "tanh", "token_logprobs",
    "topological_order", "transpose", "tsum", "zero_grads", "GradCheckReport", "gradient_check",
    "AdamState", "adam_step", "clip_grad_norm", "global_grad_norm",
]
