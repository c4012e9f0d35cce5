"""Nadam and SGD (Nesterov momentum, weight decay) over a :class:`ModelGraph`."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, ClassVar

import numpy as np

from featherlite.netgraph import ModelGraph
from featherlite.tensor import ConfigurationError, ShapeError, require_shape

logger = logging.getLogger(__name__)


@dataclass
class NadamState:
    """Nadam hyperparameters and the moments of one parameter tensor."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


@dataclass
class SgdState:
    """SGD hyperparameters and the velocity of one parameter tensor."""

    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    decoupled: bool = True
    velocity: np.ndarray | None = None


def nadam_step(param: np.ndarray, grad: np.ndarray, state: NadamState) -> tuple[np.ndarray, NadamState]:
    """One Nadam update.

    ``m = b1 m + (1-b1) g``; ``v = b2 v + (1-b2) g^2``; with bias-corrected
    ``m_hat`` and ``v_hat`` the step uses the Nesterov numerator
    ``b1 m_hat + (1-b1) g / (1-b1^t)`` over ``sqrt(v_hat) + eps``.
    """
    require_shape(grad, param.shape, "nadam gradient")
    if state.m is None or state.v is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**t)
    v_hat = state.v / (1 - b2**t)
    m_bar = b1 * m_hat + (1 - b1) * grad / (1 - b1**t)
    updated = param - state.lr * m_bar / (np.sqrt(v_hat) + state.epsilon)
    return updated.astype(param.dtype, copy=False), state


def sgd_step(param: np.ndarray, grad: np.ndarray, state: SgdState) -> tuple[np.ndarray, SgdState]:
    """One SGD update with momentum and weight decay.

    Decoupled mode shrinks first, ``w = w (1 - lr wd)``; coupled mode adds
    ``wd w`` to the gradient instead. Then ``v = mu v + g`` and either
    ``w -= lr (g + mu v)`` (Nesterov) or ``w -= lr v``.
    """
    require_shape(grad, param.shape, "sgd gradient")
    if state.velocity is None:
        state.velocity = np.zeros_like(param)
    w = param
    g = grad
    if state.weight_decay:
        if state.decoupled:
            w = w * (1 - state.lr * state.weight_decay)
        else:
            g = g + state.weight_decay * w
    state.velocity = state.momentum * state.velocity + g
    if state.nesterov:
        w = w - state.lr * (g + state.momentum * state.velocity)
    else:
        w = w - state.lr * state.velocity
    return w.astype(param.dtype, copy=False), state


class Optimizer:
    """Applies per-parameter update rules to every trainable node of a graph.

    Frozen nodes are skipped entirely: no decay, no moment or velocity update.
    """

    kind: ClassVar[str] = "optimizer"
    slot_names: ClassVar[tuple[str, ...]] = ()

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self.steps = 0
        self._states: dict[tuple[str, str], Any] = {}

    def hyperparameters(self) -> dict[str, Any]:
        raise NotImplementedError("Subclasses must implement hyperparameters()")

    def _new_state(self) -> Any:
        raise NotImplementedError("Subclasses must implement _new_state()")

    def _update(self, param: np.ndarray, grad: np.ndarray, state: Any) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement _update()")

    def step(self, param_grads: dict[str, dict[str, np.ndarray]]) -> None:
        """Update every unfrozen parameter that has a gradient."""
        self.steps += 1
        for node in self.graph.parameterized_nodes():
            if node.layer.frozen:
                continue
            grads = param_grads.get(node.name)
            if not grads:
                continue
            for key, value in node.layer.parameters().items():
                if key not in grads:
                    continue
                state = self._states.get((node.name, key))
                if state is None:
                    state = self._states[(node.name, key)] = self._new_state()
                node.layer.set_parameter(key, self._update(value, grads[key], state))

    def state_dict(self) -> dict[str, Any]:
        """Hyperparameters, step count, and per-parameter slot arrays."""
        slots: dict[str, dict[str, dict[str, np.ndarray]]] = {name: {} for name in self.slot_names}
        for (node_name, key), state in self._states.items():
            for slot in self.slot_names:
                value = getattr(state, slot)
                if value is not None:
                    slots[slot].setdefault(node_name, {})[key] = value.copy()
        return {"kind": self.kind, "hyper": self.hyperparameters(), "step": self.steps, "slots": slots}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        """Restore :meth:`state_dict` output for the same graph.

        Raises:
            ConfigurationError: If the state belongs to another optimizer kind.
            ShapeError: If a slot does not match its parameter.
        """
        if state.get("kind") != self.kind:
            raise ConfigurationError(f"cannot load {state.get('kind')!r} state into {self.kind}")
        self.steps = int(state.get("step", 0))
        self._states = {}
        for slot, per_node in state.get("slots", {}).items():
            if slot not in self.slot_names:
                raise ConfigurationError(f"{self.kind} has no state slot '{slot}'")
            for node_name, per_param in per_node.items():
                params = self.graph.node(node_name).layer.parameters()
                for key, value in per_param.items():
                    if key not in params or params[key].shape != value.shape:
                        raise ShapeError(f"{slot} state for {node_name}.{key} does not match the graph")
                    entry = self._states.get((node_name, key))
                    if entry is None:
                        entry = self._states[(node_name, key)] = self._new_state()
                    setattr(entry, slot, np.array(value, dtype=params[key].dtype))
        self._after_load()

    def _after_load(self) -> None:
        pass


class Nadam(Optimizer):
    """Nadam with the usual defaults (lr 0.001, betas 0.9/0.999, eps 1e-7)."""

    kind: ClassVar[str] = "nadam"
    slot_names: ClassVar[tuple[str, ...]] = ("m", "v")

    def __init__(
        self,
        graph: ModelGraph,
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-7,
    ):
        super().__init__(graph)
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or epsilon <= 0:
            raise ConfigurationError(
                f"invalid Nadam hyperparameters lr={lr} beta1={beta1} beta2={beta2} epsilon={epsilon}"
            )
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon

    def hyperparameters(self) -> dict[str, Any]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}

    def _new_state(self) -> NadamState:
        return NadamState(self.lr, self.beta1, self.beta2, self.epsilon)

    def _update(self, param: np.ndarray, grad: np.ndarray, state: NadamState) -> np.ndarray:
        return nadam_step(param, grad, state)[0]

    def _after_load(self) -> None:
        for state in self._states.values():
            state.t = self.steps


class SGD(Optimizer):
    """SGD with momentum, Nesterov lookahead, and (decoupled by default) weight decay."""

    kind: ClassVar[str] = "sgd"
    slot_names: ClassVar[tuple[str, ...]] = ("velocity",)

    def __init__(
        self,
        graph: ModelGraph,
        lr: float = 0.001,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        nesterov: bool = True,
        decoupled_weight_decay: bool = True,
    ):
        super().__init__(graph)
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ConfigurationError(
                f"invalid SGD hyperparameters lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.nesterov, self.decoupled = nesterov, decoupled_weight_decay

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "nesterov": self.nesterov,
            "decoupled_weight_decay": self.decoupled,
        }

    def _new_state(self) -> SgdState:
        return SgdState(self.lr, self.momentum, self.weight_decay, self.nesterov, self.decoupled)

    def _update(self, param: np.ndarray, grad: np.ndarray, state: SgdState) -> np.ndarray:
        return sgd_step(param, grad, state)[0]


OPTIMIZERS: dict[str, type[Optimizer]] = {Nadam.kind: Nadam, SGD.kind: SGD}


def build_optimizer(graph: ModelGraph, kind: str, **hyper: Any) -> Optimizer:
    """Create an optimizer by name (``nadam`` or ``sgd``)."""
    try:
        cls = OPTIMIZERS[kind]
    except KeyError as exc:
        raise ConfigurationError(f"unknown optimizer '{kind}'") from exc
    logger.debug("Creating %s optimizer with %s", kind, hyper)
    return cls(graph, **hyper)
