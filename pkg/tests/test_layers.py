"""Tests for layer forward passes and finite-difference gradient checks."""

import numpy as np
import pytest

from featherlite.layers import (
    Concatenate,
    Conv2D,
    Conv2DParams,
    Dense,
    DenseParams,
    Dropout,
    Flatten,
    MaxPool2D,
    conv2d_backward,
    conv2d_forward,
    dense_forward,
    dropout,
    maxpool2d,
    maxpool2d_backward,
)
from featherlite.layers.activations import relu, relu_backward, softmax
from featherlite.lossmetrics import sparse_ce_batch
from featherlite.tensor import ConfigurationError, RngStream, ShapeError

EPS = 1e-6


def _numeric_grad(fn, array: np.ndarray) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + EPS
        plus = fn()
        array[idx] = original - EPS
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * EPS)
    return grad


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, float(np.max(np.abs(a) + np.abs(b)))))


def _conv_params(kh: int, kw: int, cin: int, filters: int, seed: int, **kwargs) -> Conv2DParams:
    gen = np.random.default_rng(seed)
    return Conv2DParams(
        kernels=gen.normal(size=(kh, kw, cin, filters)),
        bias=gen.normal(size=filters),
        **kwargs,
    )


# Convolution -------------------------------------------------------------------


def test_conv_output_shape_for_first_branch_layer() -> None:
    layer = Conv2D.create(1, 10, (3, 3), RngStream(0, "init/conv"))
    out = layer.forward(np.zeros((2, 28, 28, 1), dtype=np.float32))
    assert out.shape == (2, 26, 26, 10)
    assert layer.output_shape((28, 28, 1)) == (26, 26, 10)


def test_conv_identity_kernel_returns_input() -> None:
    params = Conv2DParams(kernels=np.ones((1, 1, 1, 1)), bias=np.zeros(1))
    image = np.random.default_rng(0).random((4, 5, 1))
    np.testing.assert_allclose(conv2d_forward(image, params), image)


def test_conv_direct_summation() -> None:
    params = Conv2DParams(kernels=np.ones((2, 2, 1, 1)), bias=np.zeros(1))
    out = conv2d_forward(np.ones((2, 2, 1)), params)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(4.0)


def test_conv_matches_naive_loop() -> None:
    params = _conv_params(3, 3, 2, 4, seed=1)
    x = np.random.default_rng(2).normal(size=(2, 6, 7, 2))
    out = conv2d_forward(x, params)
    expected = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for y in range(4):
            for xx in range(5):
                window = x[n, y : y + 3, xx : xx + 3, :]
                expected[n, y, xx] = np.tensordot(window, params.kernels, axes=3) + params.bias
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)


def test_conv_channel_mismatch_raises() -> None:
    params = _conv_params(3, 3, 2, 4, seed=0)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 8, 8, 3)), params)


def test_conv_same_padding_keeps_spatial_size() -> None:
    params = _conv_params(3, 3, 1, 2, seed=0, padding="same")
    assert conv2d_forward(np.zeros((1, 7, 9, 1)), params).shape == (1, 7, 9, 2)


def test_conv_scalar_backward_by_hand() -> None:
    params = Conv2DParams(kernels=np.full((1, 1, 1, 1), 3.0), bias=np.zeros(1))
    x = np.full((1, 1, 1), 2.0)
    grads = conv2d_backward(x, params, np.full((1, 1, 1), 0.5))
    assert grads.param_grads["kernels"].item() == pytest.approx(0.5 * 2.0)
    assert grads.input_grad.item() == pytest.approx(0.5 * 3.0)


def test_conv_zero_upstream_gives_zero_gradients() -> None:
    params = _conv_params(3, 3, 1, 2, seed=3)
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
    grads = conv2d_backward(x, params, np.zeros((2, 3, 3, 2)))
    assert not grads.input_grad.any()
    assert not grads.param_grads["kernels"].any()
    assert not grads.param_grads["bias"].any()


@pytest.mark.parametrize(
    ("padding", "stride"),
    [
        ("valid", (1, 1)),
        ("same", (1, 1)),
        ("valid", (2, 2)),
        ("same", (2, 1)),
    ],
)
def test_conv_gradients_match_finite_differences(padding: str, stride: tuple[int, int]) -> None:
    params = _conv_params(3, 3, 2, 3, seed=4, padding=padding, stride=stride)
    gen = np.random.default_rng(5)
    x = gen.normal(size=(2, 6, 5, 2))
    out_shape = conv2d_forward(x, params).shape
    weights = gen.normal(size=out_shape)

    def loss() -> float:
        return float(np.sum(conv2d_forward(x, params) * weights))

    grads = conv2d_backward(x, params, weights)
    assert _rel_error(grads.input_grad, _numeric_grad(loss, x)) < 1e-6
    assert _rel_error(grads.param_grads["kernels"], _numeric_grad(loss, params.kernels)) < 1e-6
    assert _rel_error(grads.param_grads["bias"], _numeric_grad(loss, params.bias)) < 1e-6


def test_conv_layer_relu_gradients_match_finite_differences() -> None:
    layer = Conv2D(_conv_params(3, 3, 1, 2, seed=6, activation="relu"), name="conv")
    gen = np.random.default_rng(7)
    x = gen.normal(size=(1, 5, 5, 1))
    weights = gen.normal(size=(1, 3, 3, 2))

    def loss() -> float:
        return float(np.sum(layer.forward(x) * weights))

    layer.forward(x)
    analytic = layer.backward(weights)
    assert _rel_error(analytic.param_grads["kernels"], _numeric_grad(loss, layer.params.kernels)) < 1e-5


def test_frozen_conv_layer_skips_parameter_gradients() -> None:
    layer = Conv2D(_conv_params(3, 3, 1, 2, seed=0), name="conv")
    layer.frozen = True
    out = layer.forward(np.ones((1, 4, 4, 1)))
    grads = layer.backward(np.ones_like(out))
    assert grads.param_grads == {}
    assert grads.input_grad is not None


# Pooling -------------------------------------------------------------------


@pytest.mark.parametrize(
    ("shape", "expected"),
    [
        ((26, 26, 10), (13, 13, 10)),
        ((11, 11, 20), (5, 5, 20)),
        ((13, 13, 20), (6, 6, 20)),
    ],
)
def test_maxpool_floor_semantics(shape: tuple[int, int, int], expected: tuple[int, int, int]) -> None:
    out, _ = maxpool2d(np.zeros((1, *shape)))
    assert out.shape[1:] == expected
    assert MaxPool2D(2).output_shape(shape) == expected


def test_maxpool_constant_input_routes_to_first_window_element() -> None:
    x = np.ones((1, 4, 4, 1))
    out, argmax = maxpool2d(x)
    np.testing.assert_array_equal(out, np.ones((1, 2, 2, 1)))
    grad = maxpool2d_backward(np.ones_like(out), argmax, x.shape)
    expected = np.zeros((1, 4, 4, 1))
    expected[0, ::2, ::2, 0] = 1.0
    np.testing.assert_array_equal(grad, expected)


def test_maxpool_gradients_match_finite_differences() -> None:
    layer = MaxPool2D(2)
    gen = np.random.default_rng(8)
    x = gen.normal(size=(2, 5, 7, 3))
    weights = gen.normal(size=(2, 2, 3, 3))

    def loss() -> float:
        return float(np.sum(layer.forward(x) * weights))

    layer.forward(x)
    analytic = layer.backward(weights).input_grad
    assert _rel_error(analytic, _numeric_grad(loss, x)) < 1e-6


def test_maxpool_rejects_overlapping_windows() -> None:
    with pytest.raises(ConfigurationError):
        maxpool2d(np.zeros((1, 4, 4, 1)), pool=3, stride=2)


def test_maxpool_rejects_input_smaller_than_window() -> None:
    with pytest.raises(ShapeError):
        maxpool2d(np.zeros((1, 1, 4, 1)))


# Dense and activations -------------------------------------------------------------------


def test_dense_identity() -> None:
    params = DenseParams(np.eye(4), np.zeros(4))
    x = np.arange(4.0)
    np.testing.assert_array_equal(dense_forward(x, params), x)


@pytest.mark.parametrize("activation", ["linear", "relu", "softmax"])
def test_dense_gradients_match_finite_differences(activation: str) -> None:
    gen = np.random.default_rng(9)
    layer = Dense(DenseParams(gen.normal(size=(6, 4)), gen.normal(size=4), activation=activation), name="d")
    x = gen.normal(size=(3, 6))
    weights = gen.normal(size=(3, 4))

    def loss() -> float:
        return float(np.sum(layer.forward(x) * weights))

    layer.forward(x)
    analytic = layer.backward(weights)
    assert _rel_error(analytic.param_grads["weights"], _numeric_grad(loss, layer.params.weights)) < 1e-5
    assert _rel_error(analytic.param_grads["bias"], _numeric_grad(loss, layer.params.bias)) < 1e-5
    assert _rel_error(analytic.input_grad, _numeric_grad(loss, x)) < 1e-5


def test_dense_rejects_wrong_width() -> None:
    layer = Dense.create(5, 3, RngStream(0, "init/d"))
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((2, 4)))


def test_relu_values_and_gradient() -> None:
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    negative = -np.ones(5)
    assert not relu(negative).any()
    assert not relu_backward(negative, np.ones(5)).any()


def test_softmax_closed_forms() -> None:
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.log(np.array([1.0, 2.0, 7.0]))), [0.1, 0.2, 0.7])
    logits = np.array([1.0, -2.0, 3.5])
    np.testing.assert_allclose(softmax(logits + 100.0), softmax(logits))


# Dropout and shape layers -------------------------------------------------------------------


def test_dropout_identity_at_inference_and_zero_rate() -> None:
    x = np.random.default_rng(0).random((4, 8))
    out, mask = dropout(x, 0.5, training=False)
    assert out is x and mask is None
    out, mask = dropout(x, 0.0, training=True, rng=RngStream(0, "d"))
    assert out is x and mask is None


def test_dropout_scales_survivors() -> None:
    x = np.ones((200, 50))
    out, _ = dropout(x, 0.5, training=True, rng=RngStream(3, "dropout"))
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.45 < np.mean(out == 0.0) < 0.55


def test_dropout_layer_backward_uses_mask() -> None:
    layer = Dropout(0.5)
    x = np.ones((10, 10))
    out = layer.forward(x, training=True, rng=RngStream(1, "dropout"))
    grad = layer.backward(np.ones_like(x)).input_grad
    np.testing.assert_array_equal(grad, out)


def test_dropout_rejects_rate_of_one() -> None:
    with pytest.raises(ConfigurationError):
        Dropout(1.0)


def test_flatten_and_concatenate_round_trip_gradients() -> None:
    flatten = Flatten()
    x = np.arange(2 * 3 * 3 * 4, dtype=np.float64).reshape(2, 3, 3, 4)
    flat = flatten.forward(x)
    assert flat.shape == (2, 36)
    np.testing.assert_array_equal(flatten.backward(flat).input_grad, x)

    concat = Concatenate()
    a, b = np.ones((2, 1, 1, 10)), np.zeros((2, 1, 1, 10))
    joined = concat.forward(a, b)
    assert joined.shape == (2, 1, 1, 20)
    assert concat.output_shape((1, 1, 10), (1, 1, 10)) == (1, 1, 20)
    ga, gb = concat.backward(joined).input_grads
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)


# Randomized gradient sweep -------------------------------------------------------------------

SWEEP_SEEDS = range(100)


@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_conv_gradients_over_random_shapes(seed: int) -> None:
    gen = np.random.default_rng(seed)
    kh, kw = (int(k) for k in gen.integers(1, 4, size=2))
    cin, filters = int(gen.integers(1, 4)), int(gen.integers(1, 5))
    padding = str(gen.choice(["valid", "same"]))
    stride = (int(gen.integers(1, 3)), int(gen.integers(1, 3)))
    params = _conv_params(kh, kw, cin, filters, seed=seed + 1000, padding=padding, stride=stride)
    x = gen.normal(size=(int(gen.integers(1, 3)), int(gen.integers(kh, 8)), int(gen.integers(kw, 8)), cin))
    weights = gen.normal(size=conv2d_forward(x, params).shape)

    def loss() -> float:
        return float(np.sum(conv2d_forward(x, params) * weights))

    grads = conv2d_backward(x, params, weights)
    assert _rel_error(grads.input_grad, _numeric_grad(loss, x)) < 1e-5
    assert _rel_error(grads.param_grads["kernels"], _numeric_grad(loss, params.kernels)) < 1e-5
    assert _rel_error(grads.param_grads["bias"], _numeric_grad(loss, params.bias)) < 1e-5


@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_maxpool_gradients_over_random_shapes(seed: int) -> None:
    gen = np.random.default_rng(seed)
    layer = MaxPool2D(2)
    shape = [int(gen.integers(1, 3)), *(int(v) for v in gen.integers(2, 8, size=2)), int(gen.integers(1, 4))]
    x = gen.normal(size=shape)
    weights = gen.normal(size=layer.forward(x).shape)

    def loss() -> float:
        return float(np.sum(layer.forward(x) * weights))

    layer.forward(x)
    analytic = layer.backward(weights).input_grad
    assert _rel_error(analytic, _numeric_grad(loss, x)) < 1e-5


@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_dense_gradients_over_random_shapes(seed: int) -> None:
    gen = np.random.default_rng(seed)
    units_in, units_out = int(gen.integers(1, 9)), int(gen.integers(1, 7))
    activation = str(gen.choice(["linear", "softmax"]))
    params = DenseParams(
        gen.normal(size=(units_in, units_out)), gen.normal(size=units_out), activation=activation
    )
    layer = Dense(params, name="d")
    x = gen.normal(size=(int(gen.integers(1, 5)), units_in))
    weights = gen.normal(size=(x.shape[0], units_out))

    def loss() -> float:
        return float(np.sum(layer.forward(x) * weights))

    layer.forward(x)
    analytic = layer.backward(weights)
    assert _rel_error(analytic.param_grads["weights"], _numeric_grad(loss, layer.params.weights)) < 1e-5
    assert _rel_error(analytic.param_grads["bias"], _numeric_grad(loss, layer.params.bias)) < 1e-5
    assert _rel_error(analytic.input_grad, _numeric_grad(loss, x)) < 1e-5


@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_softmax_cross_entropy_gradients_over_random_shapes(seed: int) -> None:
    gen = np.random.default_rng(seed)
    n, classes = int(gen.integers(1, 5)), int(gen.integers(2, 11))
    logits = gen.normal(size=(n, classes)) * 2
    labels = gen.integers(0, classes, size=n)

    def loss() -> float:
        return sparse_ce_batch(softmax(logits), labels)[0]

    _, analytic = sparse_ce_batch(softmax(logits), labels)
    assert _rel_error(analytic, _numeric_grad(loss, logits)) < 1e-4
