"""Tests for the Nadam and SGD update rules and the graph optimizers."""

import numpy as np
import pytest

from featherlite.netgraph import FreezeMask, build_branch, set_freeze
from featherlite.optim import SGD, Nadam, NadamState, SgdState, build_optimizer, nadam_step, sgd_step
from featherlite.tensor import ConfigurationError, ShapeError


def test_sgd_zero_gradient_without_decay_is_identity() -> None:
    w = np.array([1.5, -2.0])
    updated, _ = sgd_step(w, np.zeros(2), SgdState(weight_decay=0.0))
    np.testing.assert_array_equal(updated, w)


def test_sgd_nesterov_hand_trace() -> None:
    updated, state = sgd_step(np.array([1.0]), np.array([0.1]), SgdState(weight_decay=0.0))
    np.testing.assert_allclose(state.velocity, [0.1])
    np.testing.assert_allclose(updated, [1.0 - 0.001 * (0.1 + 0.09)])
    assert updated[0] == pytest.approx(0.99981)


def test_sgd_decoupled_decay_applies_before_momentum() -> None:
    state = SgdState(lr=0.1, momentum=0.9, weight_decay=0.01)
    updated, _ = sgd_step(np.array([1.0]), np.array([0.5]), state)
    # w = 1 * (1 - 0.1 * 0.01) = 0.999, then 0.999 - 0.1 * (0.5 + 0.9 * 0.5)
    assert updated[0] == pytest.approx(0.904)


def test_sgd_coupled_decay_adds_to_gradient() -> None:
    state = SgdState(lr=0.1, momentum=0.0, weight_decay=0.5, nesterov=False, decoupled=False)
    updated, _ = sgd_step(np.array([2.0]), np.array([0.0]), state)
    assert updated[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_momentum_grows_step() -> None:
    state = SgdState(weight_decay=0.0)
    w0 = np.array([1.0])
    w1, state = sgd_step(w0, np.array([0.1]), state)
    w2, _ = sgd_step(w1, np.array([0.1]), state)
    assert abs(w2[0] - w1[0]) > abs(w1[0] - w0[0])


def test_nadam_zero_gradient_first_step_is_identity() -> None:
    w = np.array([0.3, -0.7])
    updated, state = nadam_step(w, np.zeros(2), NadamState())
    np.testing.assert_array_equal(updated, w)
    assert state.t == 1


def test_nadam_first_step_hand_trace() -> None:
    updated, state = nadam_step(np.array([0.0]), np.array([1.0]), NadamState())
    # m_hat = v_hat = 1; numerator 0.9 * 1 + 0.1 * 1 / (1 - 0.9) = 1.9
    assert updated[0] == pytest.approx(-0.001 * 1.9 / (1.0 + 1e-7))
    assert updated[0] == pytest.approx(-0.0019, abs=1e-9)
    np.testing.assert_allclose(state.m, [0.1])
    np.testing.assert_allclose(state.v, [0.001])


@pytest.mark.parametrize("grad", [-3.0, -0.01, 0.02, 5.0])
def test_nadam_step_opposes_gradient_sign(grad: float) -> None:
    updated, _ = nadam_step(np.array([0.0]), np.array([grad]), NadamState())
    assert np.sign(updated[0]) == -np.sign(grad)


@pytest.mark.parametrize("kind", ["nadam", "sgd"])
def test_quadratic_is_driven_towards_zero(kind: str) -> None:
    w = np.full(4, 0.5)
    state = NadamState(lr=0.01) if kind == "nadam" else SgdState(lr=0.05, weight_decay=0.0)
    step = nadam_step if kind == "nadam" else sgd_step
    norms = [float(np.linalg.norm(w))]
    for _ in range(500):
        w, state = step(w, w.copy(), state)
        norms.append(float(np.linalg.norm(w)))
    assert norms[1] < norms[0]
    assert norms[-1] < 0.05 * norms[0]


def test_step_rejects_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        sgd_step(np.zeros(3), np.zeros(2), SgdState())
    with pytest.raises(ShapeError):
        nadam_step(np.zeros(3), np.zeros(2), NadamState())


def _ones_grads(graph):
    return {
        node.name: {key: np.ones_like(value) for key, value in node.layer.parameters().items()}
        for node in graph.parameterized_nodes()
    }


@pytest.mark.parametrize("kind", ["nadam", "sgd"])
def test_optimizer_skips_frozen_nodes(kind: str) -> None:
    graph = build_branch((10, 10, 1), seed=0)
    mask = FreezeMask.all_trainable(graph)
    mask.trainable["model1/conv1"] = False
    set_freeze(graph, mask)
    frozen_before = graph.node("model1/conv1").layer.parameters()["kernels"].copy()
    dense_before = graph.node("model1/dense").layer.parameters()["weights"].copy()

    optimizer = build_optimizer(graph, kind)
    for _ in range(3):
        optimizer.step(_ones_grads(graph))

    np.testing.assert_array_equal(graph.node("model1/conv1").layer.parameters()["kernels"], frozen_before)
    assert not np.array_equal(graph.node("model1/dense").layer.parameters()["weights"], dense_before)
    assert "model1/conv1" not in optimizer.state_dict()["slots"][optimizer.slot_names[0]]


def test_state_dict_load_rejects_other_kind() -> None:
    graph = build_branch((10, 10, 1))
    nadam = Nadam(graph)
    nadam.step(_ones_grads(graph))
    with pytest.raises(ConfigurationError):
        SGD(graph).load_state_dict(nadam.state_dict())


def test_state_dict_round_trip_continues_identically() -> None:
    graph = build_branch((10, 10, 1), seed=2)
    twin = graph.copy()
    first = Nadam(graph)
    first.step(_ones_grads(graph))
    second = Nadam(twin)
    twin.set_weights(graph.get_weights())
    second.load_state_dict(first.state_dict())
    first.step(_ones_grads(graph))
    second.step(_ones_grads(twin))
    for left, right in zip(graph.get_weights(), twin.get_weights(), strict=True):
        np.testing.assert_array_equal(left, right)


@pytest.mark.parametrize(
    ("kind", "hyper"),
    [
        ("nadam", {"lr": 0.0}),
        ("sgd", {"momentum": 1.0}),
        ("sgd", {"weight_decay": -1.0}),
        ("adam", {}),
    ],
)
def test_build_optimizer_rejects_invalid_configuration(kind: str, hyper: dict) -> None:
    with pytest.raises(ConfigurationError):
        build_optimizer(build_branch((10, 10, 1)), kind, **hyper)
