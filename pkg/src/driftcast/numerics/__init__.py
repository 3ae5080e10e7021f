from .tensor import (
    NumericsError,
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    leaky_relu,
    matmul,
    mul,
    narrow,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax_masked,
    sqrt,
    square,
    stop_gradient,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .gradcheck import GradReport, check_gradients, finite_diff_grad

__all__ = [
    "NumericsError", "Tape", "Tensor", "absolute", "add", "as_tensor", "backward",
    "concat", "div", "exp", "leaky_relu", "matmul", "mul", "narrow", "neg", "relu",
    "reshape", "sigmoid", "softmax_masked", "sqrt", "square", "stop_gradient", "sub",
    "tanh", "tmean", "transpose", "tsum",
    "GradReport", "check_gradients", "finite_diff_grad",
]
