from .nn import conv2d, grid_sample, group_norm, linear, upsample_nearest2x
from .optim import AdamState, NumericalError, RowAdam, adam_step, check_finite
from .tensor import (
    GradMap,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    add,
    broadcast_to,
    clip,
    concat,
    cos,
    cumsum,
    default_dtype,
    div,
    exp,
    index,
    log,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    power,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    silu,
    sin,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    tensor,
    transpose,
    where,
)
