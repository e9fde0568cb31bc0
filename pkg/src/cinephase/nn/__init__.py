"""Minimal differentiable-array engine for the two networks in this package."""

from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, check_gradients, grad_check
from .layers import (
    Conv2D,
    Dense,
    DepthwiseConv1D,
    Dropout,
    Layer,
    MaxPool2D,
    ReLU,
    Sigmoid,
    Tape,
    Upsample2D,
    backward,
    forward,
    init_params,
    output_shape,
)
from .params import ParamStore, config_hash, load_params, save_params

__all__ = [
    "AdamState",
    "Conv2D",
    "Dense",
    "DepthwiseConv1D",
    "Dropout",
    "GradCheckReport",
    "Layer",
    "MaxPool2D",
    "ParamStore",
    "ReLU",
    "Sigmoid",
    "Tape",
    "Upsample2D",
    "adam_step",
    "backward",
    "check_gradients",
    "config_hash",
    "forward",
    "grad_check",
    "init_params",
    "load_params",
    "output_shape",
    "save_params",
]
