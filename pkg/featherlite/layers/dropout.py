"""Inverted dropout."""

from __future__ import annotations

from typing import Any, ClassVar

import numpy as np

from featherlite.layers.base import Layer, LayerGrad
from featherlite.tensor import ConfigurationError, RngStream


def dropout(
    x: np.ndarray, rate: float, *, training: bool, rng: RngStream | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Zero elements with probability ``rate`` and rescale survivors by ``1 / (1 - rate)``.

    Inference mode (and ``rate == 0``) is the identity.

    Returns:
        ``(output, mask)``; ``mask`` is the per-element scale, or None when
        the call was the identity.

    Raises:
        ConfigurationError: If ``rate`` is outside ``[0, 1)``.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigurationError("training-mode dropout needs an RngStream")
    keep = rng.generator().random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


class Dropout(Layer):
    """Dropout layer; identity at inference."""

    kind: ClassVar[str] = "dropout"

    def __init__(self, rate: float = 0.5, name: str = ""):
        super().__init__(name=name)
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask: np.ndarray | None = None

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shapes[0])

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        out, self._mask = dropout(inputs[0], self.rate, training=training, rng=rng)
        return out

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if not need_input_grads:
            return LayerGrad(input_grads=(None,))
        grad = upstream if self._mask is None else upstream * self._mask
        return LayerGrad(input_grads=(grad,))

    def config(self) -> dict[str, Any]:
        return {"rate": self.rate}
