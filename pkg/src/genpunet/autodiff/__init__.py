"""Minimal reverse-mode autodiff over numpy arrays."""

from .gradcheck import gradient_check
from .nn import RunningStats, avgpool2d, batchnorm2d, bilinear_upsample2d, conv2d, global_avgpool2d
from .ops import (
    add,
    bce_with_logits,
    broadcast_to,
    concat,
    diagonal,
    div,
    elementwise,
    exp,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    solve_triangular,
    square,
    stack,
    sub,
    sum,
    transpose,
)
from .tensor import Tape, Tensor, active_tape, backward, record

__all__ = [
    "Tape", "Tensor", "active_tape", "backward", "record", "gradient_check",
    "RunningStats", "avgpool2d", "batchnorm2d", "bilinear_upsample2d", "conv2d", "global_avgpool2d",
    "add", "bce_with_logits", "broadcast_to", "concat", "diagonal", "div", "elementwise", "exp",
    "log", "log_softmax", "logsumexp", "matmul", "mean", "mul", "neg", "relu", "reshape",
    "sigmoid", "softmax", "solve_triangular", "square", "stack", "sub", "sum", "transpose",
]
