"""Small float64 CNN engine: shapes, forward/backward, optimizers, gradcheck."""
from .gradcheck import GradcheckReport, gradcheck, relative_error
from .model import (
    ARCHITECTURES,
    SHARED_LAYERS,
    LayerParams,
    LayerSpec,
    ModelSpec,
    compact_spec,
    conv2d,
    copy_params,
    dense,
    flatten,
    flatten_params,
    infer_shapes,
    init_params,
    param_shapes,
    params_equal,
    relu,
    full_spec,
    unflatten_params,
    zeros_like_params,
)
from .ops import (
    backward,
    check_finite,
    forward,
    loss_ce,
    loss_distill,
    loss_value,
    softmax,
    value_and_grad,
)
from .optim import ADAM, SGD, OptimizerState, adam_step, make_optimizer, reset_moments, sgd_step, step

__all__ = [
    "ADAM", "ARCHITECTURES", "GradcheckReport", "LayerParams", "LayerSpec", "ModelSpec",
    "OptimizerState", "SGD", "SHARED_LAYERS", "adam_step", "backward", "check_finite",
    "compact_spec", "conv2d", "copy_params", "dense", "flatten", "flatten_params", "forward",
    "gradcheck", "infer_shapes", "init_params", "loss_ce", "loss_distill", "loss_value",
    "make_optimizer", "param_shapes", "params_equal", "relative_error", "relu", "reset_moments",
    "sgd_step", "softmax", "step", "full_spec", "unflatten_params", "value_and_grad",
    "zeros_like_params",
]
