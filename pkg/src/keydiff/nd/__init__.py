from .checkpoint import CheckpointError, load_arrays, save_arrays
from .optim import AdamConfig, NonFiniteGradient, ParamStore, adam_step
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv1d,
    group_norm,
    linear,
    matmul,
    max_pool,
    mean,
    min_reduce,
    mish,
    mse,
    mul,
    relu,
    reshape,
    silu,
    split,
    sq_dist_matrix,
    sub,
    sum_all,
    take_slice,
    transpose,
    upsample,
)

__all__ = [
    "AdamConfig",
    "CheckpointError",
    "NonFiniteGradient",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv1d",
    "group_norm",
    "linear",
    "load_arrays",
    "matmul",
    "max_pool",
    "mean",
    "min_reduce",
    "mish",
    "mse",
    "mul",
    "relu",
    "reshape",
    "save_arrays",
    "silu",
    "split",
    "sq_dist_matrix",
    "sub",
    "sum_all",
    "take_slice",
    "transpose",
    "upsample",
]
