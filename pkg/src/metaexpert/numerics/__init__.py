from .optim import OptimizerState, sgd_step
from .rng import seeded_rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    build_tape,
    concat,
    cross_entropy,
    cross_entropy_logits,
    gather,
    grad_enabled,
    grad_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    row_scale,
    scale,
    softmax,
    tensor,
    total,
)

__all__ = [
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "build_tape",
    "concat",
    "cross_entropy",
    "cross_entropy_logits",
    "gather",
    "grad_enabled",
    "grad_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "row_scale",
    "scale",
    "seeded_rng",
    "sgd_step",
    "softmax",
    "tensor",
    "total",
]
