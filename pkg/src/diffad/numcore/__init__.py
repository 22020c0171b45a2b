from diffad.numcore.rng import RngStream, box_muller, fnv1a64, mix64, rng_gaussian
from diffad.numcore.tensor import (
    Gradients,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    elementwise,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    repeat_tokens,
    reshape,
    scale,
    softmax,
    square,
    sub,
    sum,
    transpose,
)

__all__ = [
    "Gradients", "RngStream", "Tape", "Tensor", "add", "as_tensor", "backward",
    "box_muller", "concat", "elementwise", "fnv1a64", "gelu", "layer_norm", "matmul",
    "mean", "mix64", "mul", "relu", "repeat_tokens", "reshape", "rng_gaussian",
    "scale", "softmax", "square", "sub", "sum", "transpose",
]
