"""Shape-only layers: Flatten and channel-wise Concatenate."""

from __future__ import annotations

import math
from typing import ClassVar

import numpy as np

from featherlite.layers.base import Layer, LayerGrad
from featherlite.tensor import RngStream, ShapeError


class Flatten(Layer):
    """Flatten each sample in row-major ``(h, w, c)`` order."""

    kind: ClassVar[str] = "flatten"

    def __init__(self, name: str = ""):
        super().__init__(name=name)
        self._input_shape: tuple[int, ...] | None = None

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        return (math.prod(input_shapes[0]),)

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        x = inputs[0]
        self._input_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if self._input_shape is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if not need_input_grads:
            return LayerGrad(input_grads=(None,))
        return LayerGrad(input_grads=(upstream.reshape(self._input_shape),))


class Concatenate(Layer):
    """Join two inputs along the channel (last) axis."""

    kind: ClassVar[str] = "concatenate"
    n_inputs: ClassVar[int] = 2

    def __init__(self, name: str = ""):
        super().__init__(name=name)
        self._splits: list[int] = []

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        first = tuple(input_shapes[0])
        for shape in input_shapes[1:]:
            if tuple(shape[:-1]) != first[:-1]:
                raise ShapeError(f"{self.name}: cannot concatenate {first} with {tuple(shape)}")
        return (*first[:-1], sum(int(s[-1]) for s in input_shapes))

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        self._splits = list(np.cumsum([x.shape[-1] for x in inputs])[:-1])
        return np.concatenate(inputs, axis=-1)

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if not need_input_grads:
            return LayerGrad(input_grads=tuple(None for _ in range(len(self._splits) + 1)))
        return LayerGrad(input_grads=tuple(np.split(upstream, self._splits, axis=-1)))
