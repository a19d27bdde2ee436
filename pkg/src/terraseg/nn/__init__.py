"""Minimal neural-network core: autodiff tensors, layers, Adam, checkpoints."""

from .layers import (BatchNorm, BilinearUp2, Concat, Conv, Conv1x1, Conv3x3, Dense, Layer, MaxPool2,
                     Module, ReLU, Tanh, forward)
from .optim import Adam, OptimState, optimizer_step
from .tensor import Tensor, no_grad
from . import tensor as ops

__all__ = ["Adam", "BatchNorm", "BilinearUp2", "Concat", "Conv", "Conv1x1", "Conv3x3", "Dense", "Layer",
           "MaxPool2", "Module", "OptimState", "ReLU", "Tanh", "Tensor", "forward", "no_grad", "ops",
           "optimizer_step"]
