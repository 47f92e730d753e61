from .branches import note_branch, record_branches
from .gradcheck import GradcheckReport, finite_diff_gradcheck, relative_error
from .nn import conv2d, dense, flatten, maxpool2d, relu, softmax
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, concat, lift, no_grad, stack

__all__ = [
    "Adam",
    "AdamState",
    "GradcheckReport",
    "Tensor",
    "adam_step",
    "concat",
    "conv2d",
    "dense",
    "finite_diff_gradcheck",
    "flatten",
    "lift",
    "maxpool2d",
    "no_grad",
    "note_branch",
    "record_branches",
    "relative_error",
    "relu",
    "softmax",
    "stack",
]
