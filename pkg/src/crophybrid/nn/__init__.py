from crophybrid.nn.gradcheck import GradReport, grad_check
from crophybrid.nn.layers import (
    BatchNorm,
    Conv1d,
    Conv3d,
    ConvNd,
    Dense,
    Flatten,
    LabelError,
    Layer,
    ReLU,
    Squeeze,
    Standardize,
    softmax,
    softmax_xent,
)
from crophybrid.nn.optim import AdamState, OptimizerError, adam_step

__all__ = [
    "AdamState",
    "BatchNorm",
    "Conv1d",
    "Conv3d",
    "ConvNd",
    "Dense",
    "Flatten",
    "GradReport",
    "LabelError",
    "Layer",
    "OptimizerError",
    "ReLU",
    "Squeeze",
    "Standardize",
    "adam_step",
    "grad_check",
    "softmax",
    "softmax_xent",
]
