from .layers import BnMode, Model, ShapeError, build_desknet, desknet_param_count, model_apply
from .optim import Optimizer, backward, lr_at, sgd_step
from .tensor import (GraphError, NumericalError, Tensor, cross_entropy, log_softmax, softmax,
                     stop_gradient)

__all__ = [
    "BnMode", "GraphError", "Model", "NumericalError", "Optimizer", "ShapeError", "Tensor",
    "backward", "build_desknet", "cross_entropy", "desknet_param_count", "log_softmax", "lr_at",
    "model_apply", "sgd_step", "softmax", "stop_gradient",
]
