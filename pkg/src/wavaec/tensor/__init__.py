from . import ops
from .autograd import Tensor, as_tensor, default_dtype, grad_enabled, no_grad, parameter, use_dtype
from .optim import AdamState, adam_step, clip_grad_norm

__all__ = [
    "Tensor",
    "AdamState",
    "adam_step",
    "as_tensor",
    "clip_grad_norm",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "ops",
    "parameter",
    "use_dtype",
]
