"""Tests for checkpoint save/load and its failure modes."""

import json
from pathlib import Path

import numpy as np
import pytest

from featherlite.checkpoint import (
    CheckpointShapeError,
    ManifestError,
    TruncatedWeightsError,
    checkpoint_exists,
    checkpoint_paths,
    checkpoint_size_bytes,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from featherlite.netgraph import FreezeMask, build_dual_model, build_final_model, count_params, set_freeze
from featherlite.optim import SGD, Nadam
from featherlite.tensor import NonFiniteError, RngStream

MNIST_SHAPE = (28, 28, 1)


def _final_model(seed: int = 0):
    dual = build_dual_model(MNIST_SHAPE, seed=seed)
    return build_final_model([dual, dual], MNIST_SHAPE, seed=seed)


def test_checkpoint_paths_accept_stem_or_manifest(tmp_path: Path) -> None:
    manifest, weights = checkpoint_paths(tmp_path / "best")
    assert manifest.name == "best.manifest.json"
    assert weights.name == "best.weights.bin"
    assert checkpoint_paths(manifest) == (manifest, weights)
    assert checkpoint_paths(weights) == (manifest, weights)


def test_save_load_save_is_byte_identical(tmp_path: Path) -> None:
    model = _final_model(seed=3)
    first = save_checkpoint(model, tmp_path / "a" / "model", metadata={"epoch": 4})
    loaded = load_checkpoint(first)
    second = save_checkpoint(loaded, tmp_path / "b" / "model", metadata={"epoch": 4})

    assert first.read_bytes() == second.read_bytes()
    assert checkpoint_paths(first)[1].read_bytes() == checkpoint_paths(second)[1].read_bytes()


def test_loaded_model_predicts_identically(tmp_path: Path) -> None:
    model = _final_model(seed=5)
    path = save_checkpoint(model, tmp_path / "model")
    loaded = load_checkpoint(path)
    x = np.random.default_rng(0).random((4, *MNIST_SHAPE)).astype(np.float32)
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
    assert count_params(loaded).count == 14_862


def test_weight_blob_is_little_endian_float32(tmp_path: Path) -> None:
    model = _final_model()
    path = save_checkpoint(model, tmp_path / "model")
    blob = checkpoint_paths(path)[1]
    assert blob.stat().st_size == 14_862 * 4
    manifest = json.loads(path.read_text(encoding="utf-8"))
    assert manifest["dtype"] == "<f4"
    assert manifest["param_count"] == 14_862
    first = model.get_weights()[0].reshape(-1)
    np.testing.assert_array_equal(np.frombuffer(blob.read_bytes(), dtype="<f4", count=first.size), first)


def test_metadata_and_freeze_flags_round_trip(tmp_path: Path) -> None:
    model = _final_model()
    set_freeze(model, FreezeMask.head_only(model))
    path = save_checkpoint(model, tmp_path / "model", metadata={"monitor": "val_accuracy", "value": 0.5})
    checkpoint = read_checkpoint(path)
    assert checkpoint.metadata == {"monitor": "val_accuracy", "value": 0.5}
    assert FreezeMask.from_graph(checkpoint.graph) == FreezeMask.from_graph(model)
    assert checkpoint.optimizer_state is None


@pytest.mark.parametrize("optimizer_cls", [Nadam, SGD])
def test_optimizer_state_round_trips(tmp_path: Path, optimizer_cls) -> None:
    model = build_dual_model((10, 10, 1), seed=1)
    optimizer = optimizer_cls(model)
    grads = {
        node: {key: np.full_like(value, 0.1) for key, value in model.node(node).layer.parameters().items()}
        for node in ("model1/dense", "model2/conv1")
    }
    optimizer.step(grads)
    path = save_checkpoint(model, tmp_path / "model", optimizer_state=optimizer.state_dict())
    checkpoint = read_checkpoint(path)

    restored = optimizer_cls(checkpoint.graph)
    restored.load_state_dict(checkpoint.optimizer_state)
    optimizer.step(grads)
    restored.step(grads)
    for left, right in zip(model.get_weights(), checkpoint.graph.get_weights(), strict=True):
        np.testing.assert_allclose(left, right, rtol=1e-6)


def test_truncated_blob_raises(tmp_path: Path) -> None:
    path = save_checkpoint(_final_model(), tmp_path / "model")
    blob = checkpoint_paths(path)[1]
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(TruncatedWeightsError):
        load_checkpoint(path)


def test_missing_blob_raises_truncation(tmp_path: Path) -> None:
    path = save_checkpoint(_final_model(), tmp_path / "model")
    checkpoint_paths(path)[1].unlink()
    assert not checkpoint_exists(path)
    with pytest.raises(TruncatedWeightsError):
        load_checkpoint(path)


def test_oversized_blob_raises_shape_error(tmp_path: Path) -> None:
    path = save_checkpoint(_final_model(), tmp_path / "model")
    blob = checkpoint_paths(path)[1]
    blob.write_bytes(blob.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_declared_shape_mismatch_raises(tmp_path: Path) -> None:
    path = save_checkpoint(_final_model(), tmp_path / "model")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["graph"]["nodes"][0]["params"][0]["shape"] = [3, 3, 1, 11]
    path.write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        json.dumps({"format": "something-else"}),
        json.dumps({"format": "featherlite-checkpoint", "format_version": 99, "dtype": "<f4"}),
    ],
)
def test_bad_manifest_raises(tmp_path: Path, content: str) -> None:
    path = tmp_path / "model.manifest.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ManifestError):
        load_checkpoint(path)


def test_missing_manifest_raises(tmp_path: Path) -> None:
    with pytest.raises(ManifestError):
        load_checkpoint(tmp_path / "absent")


def test_checkpoint_size_counts_both_files(tmp_path: Path) -> None:
    path = save_checkpoint(_final_model(), tmp_path / "model")
    manifest, weights = checkpoint_paths(path)
    assert checkpoint_size_bytes(path) == manifest.stat().st_size + weights.stat().st_size


def test_dropout_state_is_not_saved(tmp_path: Path) -> None:
    model = _final_model()
    x = np.ones((2, *MNIST_SHAPE), dtype=np.float32)
    model.forward(x, training=True, rng=RngStream(0, "dropout"))
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "model"))
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))


def test_non_finite_weights_are_not_saved(tmp_path: Path) -> None:
    model = _final_model()
    model.node("output").layer.set_parameter("bias", np.full(10, np.inf, dtype=np.float32))
    with pytest.raises(NonFiniteError) as excinfo:
        save_checkpoint(model, tmp_path / "model")
    assert excinfo.value.where == "output/bias"
    assert not checkpoint_exists(tmp_path / "model")
