"""2D convolution over channels-last batches, using an im2col restructuring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, ClassVar, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from featherlite.layers.activations import ACTIVATIONS, activation_backward, apply_activation
from featherlite.layers.base import Layer, LayerGrad
from featherlite.tensor import (
    ConfigurationError,
    RngStream,
    ShapeError,
    he_normal_init,
    require_shape,
    zeros_init,
)

Padding = Literal["valid", "same"]


@dataclass
class Conv2DParams:
    """Convolution weights and hyperparameters.

    Attributes:
        kernels: Kernel tensor ``[kh, kw, Cin, F]``.
        bias: Bias vector ``[F]``.
        padding: ``valid`` (no padding) or ``same`` (zero padding).
        stride: ``(sh, sw)`` step between windows.
        activation: Activation applied to the convolution output.
        frozen: Whether optimizers skip these parameters.
    """

    kernels: np.ndarray
    bias: np.ndarray
    padding: Padding = "valid"
    stride: tuple[int, int] = (1, 1)
    activation: str = "linear"
    frozen: bool = False

    def __post_init__(self) -> None:
        if self.kernels.ndim != 4:
            raise ShapeError(f"conv kernels must be 4-D [kh, kw, Cin, F], got {self.kernels.shape}")
        require_shape(self.bias, (self.kernels.shape[3],), "conv bias")
        if self.padding not in ("valid", "same"):
            raise ConfigurationError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        self.stride = (int(self.stride[0]), int(self.stride[1]))
        if min(self.stride) < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return int(self.kernels.shape[0]), int(self.kernels.shape[1])

    @property
    def filters(self) -> int:
        return int(self.kernels.shape[3])

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        """Output spatial size for an input of ``height x width``."""
        kh, kw = self.kernel_size
        sh, sw = self.stride
        if self.padding == "same":
            return math.ceil(height / sh), math.ceil(width / sw)
        return (height - kh) // sh + 1, (width - kw) // sw + 1

    def _pads(self, height: int, width: int) -> tuple[tuple[int, int], tuple[int, int]]:
        if self.padding == "valid":
            return (0, 0), (0, 0)
        kh, kw = self.kernel_size
        sh, sw = self.stride
        out_h, out_w = self.output_hw(height, width)
        pad_h = max((out_h - 1) * sh + kh - height, 0)
        pad_w = max((out_w - 1) * sw + kw - width, 0)
        return (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


@dataclass
class _ConvCache:
    input_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    cols: np.ndarray
    pre: np.ndarray
    out: np.ndarray


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [H, W, C] or [N, H, W, C], got {x.shape}")
    return x, False


def _forward(x: np.ndarray, params: Conv2DParams) -> _ConvCache:
    n, height, width, channels = x.shape
    kh, kw, cin, filters = params.kernels.shape
    if channels != cin:
        raise ShapeError(f"conv input has {channels} channels, kernels expect {cin}")
    out_h, out_w = params.output_hw(height, width)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"input {height}x{width} too small for {kh}x{kw} kernel with {params.padding} padding"
        )
    (top, bottom), (left, right) = params._pads(height, width)
    padded = x
    if top or bottom or left or right:
        padded = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    sh, sw = params.stride
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::sh, ::sw][:, :out_h, :out_w]
    # [N, oh, ow, C, kh, kw] -> rows ordered (dy, dx, c) to match kernels.reshape
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * out_h * out_w, kh * kw * cin)
    pre = cols @ params.kernels.reshape(kh * kw * cin, filters) + params.bias
    pre = pre.reshape(n, out_h, out_w, filters)
    out = apply_activation(params.activation, pre)
    return _ConvCache(x.shape, padded.shape, cols, pre, out)


def _backward(
    cache: _ConvCache,
    params: Conv2DParams,
    upstream: np.ndarray,
    *,
    need_input_grad: bool,
    need_param_grads: bool,
    from_logits: bool = False,
) -> LayerGrad:
    require_shape(upstream, cache.out.shape, "conv upstream gradient")
    kh, kw, cin, filters = params.kernels.shape
    n, out_h, out_w, _ = cache.out.shape
    g_pre = activation_backward(
        params.activation, cache.pre, cache.out, upstream, from_logits=from_logits
    )
    g2 = g_pre.reshape(-1, filters)

    param_grads: dict[str, np.ndarray] = {}
    if need_param_grads:
        param_grads["kernels"] = (cache.cols.T @ g2).reshape(kh, kw, cin, filters)
        param_grads["bias"] = g2.sum(axis=0)

    input_grad = None
    if need_input_grad:
        dcols = (g2 @ params.kernels.reshape(kh * kw * cin, filters).T).reshape(
            n, out_h, out_w, kh, kw, cin
        )
        sh, sw = params.stride
        padded_grad = np.zeros(cache.padded_shape, dtype=g2.dtype)
        for dy in range(kh):
            y_stop = dy + sh * (out_h - 1) + 1
            for dx in range(kw):
                x_stop = dx + sw * (out_w - 1) + 1
                padded_grad[:, dy:y_stop:sh, dx:x_stop:sw, :] += dcols[:, :, :, dy, dx, :]
        _, height, width, _ = cache.input_shape
        (top, _), (left, _) = params._pads(height, width)
        input_grad = padded_grad[:, top : top + height, left : left + width, :]
    return LayerGrad(input_grads=(input_grad,), param_grads=param_grads)


def conv2d_forward(input: np.ndarray, params: Conv2DParams) -> np.ndarray:  # noqa: A002
    """Convolve ``input`` with ``params``.

    ``out[y, x, f] = bias[f] + sum_{dy, dx, c} input[y*sh+dy, x*sw+dx, c] * kernels[dy, dx, c, f]``
    followed by the configured activation.

    Args:
        input: ``[H, W, Cin]`` or ``[N, H, W, Cin]``.
        params: Convolution parameters.

    Returns:
        ``[H', W', F]`` or ``[N, H', W', F]`` matching the input rank.

    Raises:
        ShapeError: On channel mismatch or non-positive output size.
    """
    batch, single = _as_batch(input)
    out = _forward(batch, params).out
    return out[0] if single else out


def conv2d_backward(
    input: np.ndarray,  # noqa: A002
    params: Conv2DParams,
    upstream_grad: np.ndarray,
) -> LayerGrad:
    """Gradients of the convolution w.r.t. kernels, bias, and input."""
    batch, single = _as_batch(input)
    up = upstream_grad[np.newaxis] if single else upstream_grad
    grads = _backward(
        _forward(batch, params), params, up, need_input_grad=True, need_param_grads=True
    )
    if single:
        grads.input_grads = (grads.input_grad[0],)  # type: ignore[index]
    return grads


class Conv2D(Layer):
    """Convolution layer wrapping :class:`Conv2DParams`."""

    kind: ClassVar[str] = "conv2d"

    def __init__(self, params: Conv2DParams, name: str = ""):
        super().__init__(name=name)
        self.params = params
        self._cache: _ConvCache | None = None

    @classmethod
    def create(
        cls,
        in_channels: int,
        filters: int,
        kernel_size: tuple[int, int],
        rng: RngStream,
        *,
        activation: str = "relu",
        padding: Padding = "valid",
        name: str = "",
    ) -> Conv2D:
        """Build a He-initialized convolution with zero bias."""
        kh, kw = kernel_size
        kernels = he_normal_init((kh, kw, in_channels, filters), kh * kw * in_channels, rng)
        params = Conv2DParams(
            kernels=kernels, bias=zeros_init((filters,)), padding=padding, activation=activation
        )
        return cls(params, name=name)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"kernels": self.params.kernels, "bias": self.params.bias}

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        current = self.parameters().get(key)
        if current is None:
            super().set_parameter(key, value)
            return
        require_shape(value, current.shape, f"{self.name}.{key}")
        setattr(self.params, key, value)

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.params.frozen = bool(value)

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        height, width, channels = input_shapes[0]
        if channels != self.params.kernels.shape[2]:
            raise ShapeError(
                f"{self.name}: input has {channels} channels, kernels expect "
                f"{self.params.kernels.shape[2]}"
            )
        out_h, out_w = self.params.output_hw(height, width)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"{self.name}: input {height}x{width} too small")
        return out_h, out_w, self.params.filters

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        self._cache = _forward(inputs[0], self.params)
        return self._cache.out

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        return _backward(
            self._cache,
            self.params,
            upstream,
            need_input_grad=need_input_grads,
            need_param_grads=not self.frozen,
            from_logits=from_logits,
        )

    def config(self) -> dict[str, Any]:
        kh, kw, cin, filters = self.params.kernels.shape
        return {
            "kernel_size": [kh, kw],
            "in_channels": cin,
            "filters": filters,
            "padding": self.params.padding,
            "stride": list(self.params.stride),
            "activation": self.params.activation,
        }

    @classmethod
    def from_config(cls, name: str, config: dict[str, Any]) -> Conv2D:
        kh, kw = config["kernel_size"]
        cin, filters = int(config["in_channels"]), int(config["filters"])
        params = Conv2DParams(
            kernels=np.zeros((kh, kw, cin, filters), dtype=np.float32),
            bias=np.zeros((filters,), dtype=np.float32),
            padding=config.get("padding", "valid"),
            stride=tuple(config.get("stride", (1, 1))),  # type: ignore[arg-type]
            activation=config.get("activation", "linear"),
        )
        return cls(params, name=name)
