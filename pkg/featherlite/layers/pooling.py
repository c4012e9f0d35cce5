"""Non-overlapping max pooling with floor semantics and argmax routing."""

from __future__ import annotations

from typing import Any, ClassVar

import numpy as np

from featherlite.layers.base import Layer, LayerGrad
from featherlite.tensor import ConfigurationError, RngStream, ShapeError, require_shape


def maxpool2d(
    input: np.ndarray,  # noqa: A002
    pool: int = 2,
    stride: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool a ``[N, H, W, C]`` (or ``[H, W, C]``) tensor.

    Trailing rows/columns that do not fill a window are dropped. Ties go to
    the first window element in row-major scan order.

    Returns:
        ``(output, argmax)`` where ``argmax`` holds the flat in-window index
        (``dy * pool + dx``) of each output cell.

    Raises:
        ConfigurationError: If ``stride != pool`` (overlapping windows).
        ShapeError: If the input is smaller than one window.
    """
    if pool < 1 or stride != pool:
        raise ConfigurationError(f"only non-overlapping pooling is supported (pool={pool}, stride={stride})")
    single = input.ndim == 3
    x = input[np.newaxis] if single else input
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be 3-D or 4-D, got {input.shape}")
    n, height, width, channels = x.shape
    if height < pool or width < pool:
        raise ShapeError(f"maxpool input {height}x{width} smaller than pool {pool}")
    out_h, out_w = height // pool, width // pool
    cropped = x[:, : out_h * pool, : out_w * pool, :]
    windows = cropped.reshape(n, out_h, pool, out_w, pool, channels)
    windows = windows.transpose(0, 1, 3, 5, 2, 4).reshape(n, out_h, out_w, channels, pool * pool)
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2d_backward(
    upstream: np.ndarray,
    argmax: np.ndarray,
    input_shape: tuple[int, ...],
    pool: int = 2,
) -> np.ndarray:
    """Route each upstream value to its recorded argmax; zeros elsewhere."""
    require_shape(upstream, argmax.shape, "maxpool upstream gradient")
    single = len(input_shape) == 3
    up = upstream[np.newaxis] if single else upstream
    arg = argmax[np.newaxis] if single else argmax
    shape = (1, *input_shape) if single else tuple(input_shape)
    n, out_h, out_w, channels = up.shape
    windows = np.zeros((n, out_h, out_w, channels, pool * pool), dtype=up.dtype)
    np.put_along_axis(windows, arg[..., np.newaxis], up[..., np.newaxis], axis=-1)
    windows = windows.reshape(n, out_h, out_w, channels, pool, pool).transpose(0, 1, 4, 2, 5, 3)
    grad = np.zeros(shape, dtype=up.dtype)
    grad[:, : out_h * pool, : out_w * pool, :] = windows.reshape(n, out_h * pool, out_w * pool, channels)
    return grad[0] if single else grad


class MaxPool2D(Layer):
    """Max pooling layer (pool size equals stride)."""

    kind: ClassVar[str] = "maxpool2d"

    def __init__(self, pool: int = 2, name: str = ""):
        super().__init__(name=name)
        if pool < 1:
            raise ConfigurationError(f"pool must be positive, got {pool}")
        self.pool = pool
        self._argmax: np.ndarray | None = None
        self._input_shape: tuple[int, ...] | None = None

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        height, width, channels = input_shapes[0]
        if height < self.pool or width < self.pool:
            raise ShapeError(f"{self.name}: input {height}x{width} smaller than pool {self.pool}")
        return height // self.pool, width // self.pool, channels

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        x = inputs[0]
        out, self._argmax = maxpool2d(x, self.pool, self.pool)
        self._input_shape = x.shape
        return out

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if self._argmax is None or self._input_shape is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if not need_input_grads:
            return LayerGrad(input_grads=(None,))
        grad = maxpool2d_backward(upstream, self._argmax, self._input_shape, self.pool)
        return LayerGrad(input_grads=(grad,))

    def config(self) -> dict[str, Any]:
        return {"pool": self.pool}
