"""Elementwise and vector activations with their analytic gradients."""

from typing import Literal

import numpy as np

Activation = Literal["relu", "softmax", "linear"]
ACTIVATIONS: frozenset[str] = frozenset({"relu", "softmax", "linear"})


def relu(x: np.ndarray) -> np.ndarray:
    """Return ``max(0, x)`` elementwise."""
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass ``upstream`` where ``x > 0``; the subgradient at 0 is 0."""
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    The max is subtracted before exponentiation, which also makes the result
    invariant under adding a constant to ``x``.
    """
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``probs``."""
    dot = np.sum(upstream * probs, axis=axis, keepdims=True)
    return probs * (upstream - dot)


def apply_activation(name: str, pre: np.ndarray, axis: int = -1) -> np.ndarray:
    """Apply the named activation to pre-activation values."""
    if name == "relu":
        return relu(pre)
    if name == "softmax":
        return softmax(pre, axis=axis)
    if name == "linear":
        return pre
    raise ValueError(f"Unknown activation '{name}'")


def activation_backward(
    name: str,
    pre: np.ndarray,
    out: np.ndarray,
    upstream: np.ndarray,
    *,
    from_logits: bool = False,
    axis: int = -1,
) -> np.ndarray:
    """Map a gradient w.r.t. the activation output to one w.r.t. ``pre``.

    With ``from_logits`` a softmax layer assumes ``upstream`` is already the
    combined softmax + cross-entropy gradient w.r.t. its logits.
    """
    if name == "relu":
        return relu_backward(pre, upstream)
    if name == "softmax":
        if from_logits:
            return upstream
        return softmax_backward(out, upstream, axis=axis)
    if name == "linear":
        return upstream
    raise ValueError(f"Unknown activation '{name}'")
