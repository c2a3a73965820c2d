from . import tensor as T
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, custom_op, no_grad

__all__ = ["T", "Tape", "Tensor", "custom_op", "no_grad", "AdamState", "adam_step"]
