from .adam import AdamState, adam_step
from .autodiff import Var, backward
from .layers import affine, masked_mean, self_attention_block, softmax
from .params import ParameterSet, finite_difference_grad, grad, value_and_grad

__all__ = [
    "AdamState",
    "ParameterSet",
    "Var",
    "adam_step",
    "affine",
    "backward",
    "finite_difference_grad",
    "grad",
    "masked_mean",
    "self_attention_block",
    "softmax",
    "value_and_grad",
]
