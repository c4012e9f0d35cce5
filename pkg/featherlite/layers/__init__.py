"""Network layers with forward and analytic backward passes."""

from featherlite.layers.base import Layer, LayerGrad
from featherlite.layers.conv import Conv2D, Conv2DParams, conv2d_backward, conv2d_forward
from featherlite.layers.dense import Dense, DenseParams, dense_backward, dense_forward
from featherlite.layers.dropout import Dropout, dropout
from featherlite.layers.pooling import MaxPool2D, maxpool2d, maxpool2d_backward
from featherlite.layers.reshape import Concatenate, Flatten

LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Conv2D, MaxPool2D, Dense, Dropout, Flatten, Concatenate)
}

__all__ = [
    "LAYER_TYPES",
    "Concatenate",
    "Conv2D",
    "Conv2DParams",
    "Dense",
    "DenseParams",
    "Dropout",
    "Flatten",
    "Layer",
    "LayerGrad",
    "MaxPool2D",
    "conv2d_backward",
    "conv2d_forward",
    "dense_backward",
    "dense_forward",
    "dropout",
    "maxpool2d",
    "maxpool2d_backward",
]
