from .tensor import (
    ComputationTape,
    Function,
    MissingGradientError,
    ShapeError,
    Tensor,
    concat,
    cos,
    exp,
    grad_enabled,
    log,
    log_softmax,
    matmul,
    no_grad,
    sigmoid,
    sine,
    softmax,
)
from .nn import (
    ParameterStore,
    avg_pool,
    bilinear_sample,
    conv2d,
    conv3d,
    linear,
    sine_uniform,
    upsample,
)
from .optim import AdamState, adam_step
from .gradcheck import check_gradients

__all__ = [
    'AdamState', 'ComputationTape', 'Function', 'MissingGradientError', 'ParameterStore',
    'ShapeError', 'Tensor', 'adam_step', 'avg_pool', 'bilinear_sample', 'check_gradients',
    'concat', 'conv2d', 'conv3d', 'cos', 'exp', 'grad_enabled', 'linear', 'log', 'log_softmax',
    'matmul', 'no_grad', 'sigmoid', 'sine', 'sine_uniform', 'softmax', 'upsample',
]
