from forcepipe.nn.gradcheck import GradCheckReport, gradient_check
from forcepipe.nn.layers import (
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    ReLU,
    Sequential,
    conv2d_forward,
    dense_forward,
    dropout,
    maxpool,
    relu,
    relu_backward,
)
from forcepipe.nn.optim import Adam, OptimizerState, adam_step, mse_loss

__all__ = [
    "Adam",
    "BatchNorm2D",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "GradCheckReport",
    "Layer",
    "MaxPool2D",
    "OptimizerState",
    "ReLU",
    "Sequential",
    "adam_step",
    "conv2d_forward",
    "dense_forward",
    "dropout",
    "gradient_check",
    "maxpool",
    "mse_loss",
    "relu",
    "relu_backward",
]
