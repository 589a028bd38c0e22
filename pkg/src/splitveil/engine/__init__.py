from .layers import KINDS, LayerSpec, ShapeError, init_params, layer_forward, output_shape, param_shapes
from .numeric import NonDeterministicError, finite_diff_jacobian, max_relative_error, numeric_grad
from .optim import AdamState, adam_step, zero_grads
from .tensor import Tensor, as_tensor, avg_pool2d, conv2d, conv_transpose2d, linear, no_grad, parameter

__all__ = [
    "AdamState", "KINDS", "LayerSpec", "NonDeterministicError", "ShapeError", "Tensor",
    "adam_step", "as_tensor", "avg_pool2d", "conv2d", "conv_transpose2d", "finite_diff_jacobian",
    "init_params", "layer_forward", "linear", "max_relative_error", "no_grad", "numeric_grad",
    "output_shape", "param_shapes", "parameter", "zero_grads",
]
