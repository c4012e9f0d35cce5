"""Fully connected layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, ClassVar

import numpy as np

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


@dataclass
class DenseParams:
    """Dense weights ``[in, out]``, bias ``[out]``, activation, and freeze flag."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    frozen: bool = False

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"dense weights must be [in, out] with in, out > 0, got {self.weights.shape}")
        require_shape(self.bias, (self.weights.shape[1],), "dense bias")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def units_in(self) -> int:
        return int(self.weights.shape[0])

    @property
    def units_out(self) -> int:
        return int(self.weights.shape[1])


def dense_forward(input: np.ndarray, params: DenseParams) -> np.ndarray:  # noqa: A002
    """``y = activation(x @ W + b)`` for ``[in]`` or ``[N, in]`` input."""
    if input.shape[-1] != params.units_in:
        raise ShapeError(f"dense input has {input.shape[-1]} features, weights expect {params.units_in}")
    return apply_activation(params.activation, input @ params.weights + params.bias)


def dense_backward(
    input: np.ndarray,  # noqa: A002
    params: DenseParams,
    upstream_grad: np.ndarray,
    *,
    from_logits: bool = False,
) -> LayerGrad:
    """Gradients of the dense layer w.r.t. weights, bias, and input."""
    single = input.ndim == 1
    x = input[np.newaxis] if single else input
    up = upstream_grad[np.newaxis] if single else upstream_grad
    pre = x @ params.weights + params.bias
    out = apply_activation(params.activation, pre)
    require_shape(up, out.shape, "dense upstream gradient")
    g_pre = activation_backward(params.activation, pre, out, up, from_logits=from_logits)
    input_grad = g_pre @ params.weights.T
    return LayerGrad(
        input_grads=(input_grad[0] if single else input_grad,),
        param_grads={"weights": x.T @ g_pre, "bias": g_pre.sum(axis=0)},
    )


class Dense(Layer):
    """Dense layer wrapping :class:`DenseParams`."""

    kind: ClassVar[str] = "dense"

    def __init__(self, params: DenseParams, name: str = ""):
        super().__init__(name=name)
        self.params = params
        self._x: np.ndarray | None = None
        self._pre: np.ndarray | None = None
        self._out: np.ndarray | None = None

    @classmethod
    def create(
        cls, units_in: int, units_out: int, rng: RngStream, *, activation: str = "linear", name: str = ""
    ) -> Dense:
        """Build a He-initialized dense layer with zero bias."""
        weights = he_normal_init((units_in, units_out), units_in, rng)
        return cls(DenseParams(weights, zeros_init((units_out,)), activation=activation), name=name)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weights": self.params.weights, "bias": self.params.bias}

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
        if tuple(input_shapes[0]) != (self.params.units_in,):
            raise ShapeError(f"{self.name}: expected input ({self.params.units_in},), got {input_shapes[0]}")
        return (self.params.units_out,)

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        x = inputs[0]
        if x.ndim != 2 or x.shape[1] != self.params.units_in:
            raise ShapeError(f"{self.name}: expected [N, {self.params.units_in}], got {x.shape}")
        self._x = x
        self._pre = x @ self.params.weights + self.params.bias
        self._out = apply_activation(self.params.activation, self._pre)
        return self._out

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        if self._x is None or self._pre is None or self._out is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        require_shape(upstream, self._out.shape, f"{self.name} upstream gradient")
        g_pre = activation_backward(
            self.params.activation, self._pre, self._out, upstream, from_logits=from_logits
        )
        param_grads: dict[str, np.ndarray] = {}
        if not self.frozen:
            param_grads = {"weights": self._x.T @ g_pre, "bias": g_pre.sum(axis=0)}
        input_grad = g_pre @ self.params.weights.T if need_input_grads else None
        return LayerGrad(input_grads=(input_grad,), param_grads=param_grads)

    def config(self) -> dict[str, Any]:
        return {
            "units_in": self.params.units_in,
            "units_out": self.params.units_out,
            "activation": self.params.activation,
        }

    @classmethod
    def from_config(cls, name: str, config: dict[str, Any]) -> Dense:
        units_in, units_out = int(config["units_in"]), int(config["units_out"])
        params = DenseParams(
            np.zeros((units_in, units_out), dtype=np.float32),
            np.zeros((units_out,), dtype=np.float32),
            activation=config.get("activation", "linear"),
        )
        return cls(params, name=name)
