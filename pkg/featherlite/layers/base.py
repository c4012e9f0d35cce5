"""Base classes and data structures for network layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np

from featherlite.tensor import RngStream


@dataclass
class LayerGrad:
    """Gradients produced by one backward pass through a layer.

    Attributes:
        input_grads: Gradient w.r.t. each layer input, in input order. An
            entry is ``None`` when the caller did not ask for it.
        param_grads: Gradient per parameter name, shaped like the parameter.
            Empty for stateless or frozen layers.
    """

    input_grads: tuple[np.ndarray | None, ...]
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_grad(self) -> np.ndarray | None:
        """Gradient w.r.t. the first (usually only) input."""
        return self.input_grads[0]


class Layer:
    """Abstract base class for graph layers.

    Layers operate on batch-first arrays. ``forward`` caches whatever
    ``backward`` needs, so a layer instance serves one forward/backward pair
    at a time.
    """

    kind: ClassVar[str] = "layer"
    n_inputs: ClassVar[int] = 1

    def __init__(self, name: str = ""):
        """Initialize layer.

        Args:
            name: Graph-unique node name.
        """
        self.name = name or self.kind

    # Parameters -----------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Return parameter arrays keyed by name, in declaration order."""
        return {}

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        """Replace one parameter array."""
        raise KeyError(f"{self.kind} layer has no parameter '{key}'")

    @property
    def frozen(self) -> bool:
        """Whether optimizer steps skip this layer's parameters."""
        return False

    @frozen.setter
    def frozen(self, value: bool) -> None:
        # Stateless layers have nothing to freeze.
        pass

    def param_count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(p.size for p in self.parameters().values()))

    # Computation ----------------------------------------------------------

    def output_shape(self, *input_shapes: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for the given per-sample input shapes."""
        raise NotImplementedError("Subclasses must implement output_shape()")

    def forward(
        self, *inputs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> np.ndarray:
        """Compute the layer output for a batch."""
        raise NotImplementedError("Subclasses must implement forward()")

    def backward(
        self,
        upstream: np.ndarray,
        *,
        need_input_grads: bool = True,
        from_logits: bool = False,
    ) -> LayerGrad:
        """Back-propagate ``upstream`` through the cached forward pass.

        Args:
            upstream: Gradient of the loss w.r.t. this layer's output.
            need_input_grads: Skip input gradients when False.
            from_logits: For softmax-activated layers, treat ``upstream`` as
                the gradient w.r.t. the pre-activation logits.
        """
        raise NotImplementedError("Subclasses must implement backward()")

    # Serialization --------------------------------------------------------

    def config(self) -> dict[str, Any]:
        """Hyperparameters needed to rebuild the layer (excluding weights)."""
        return {}

    @classmethod
    def from_config(cls, name: str, config: dict[str, Any]) -> Layer:
        """Rebuild a layer with placeholder parameters from :meth:`config`."""
        return cls(name=name, **config)

    def astype(self, dtype: np.dtype | type) -> None:
        """Cast parameters in place to ``dtype``."""
        for key, value in self.parameters().items():
            self.set_parameter(key, value.astype(dtype))

    def __repr__(self) -> str:
        """Return string representation."""
        return f"{self.__class__.__name__}(name={self.name!r})"
