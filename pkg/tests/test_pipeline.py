"""Tests for the staged training pipeline on tiny in-memory and on-disk datasets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from featherlite import pipeline as pipeline_module
from featherlite.checkpoint import checkpoint_exists, load_checkpoint, read_checkpoint
from featherlite.dataio import Dataset, DatasetNotFoundError, write_synthetic_dataset
from featherlite.pipeline import Pipeline, PipelineData, PipelineStageError, run_dir_for, run_pipeline
from featherlite.pipeline_settings import PipelineSettings
from featherlite.report import load_run_bundle
from featherlite.trainer import fit


def _dataset(n: int, seed: int) -> Dataset:
    images = np.random.default_rng(seed).random((n, 12, 12, 1)).astype(np.float32)
    return Dataset(images, np.arange(n) % 10, "toy", tuple(str(i) for i in range(10)))


def _tiny_loader(_settings: PipelineSettings) -> PipelineData:
    return PipelineData(_dataset(40, 0), _dataset(20, 1), _dataset(20, 2))


def _settings(tmp_path: Path, **overrides) -> PipelineSettings:
    values = {
        "out_dir": str(tmp_path / "runs"),
        "data_dir": str(tmp_path / "data"),
        "epoch_scale": 0.05,
        "folds": 2,
        "batch_size": 16,
        "progress": False,
    }
    values.update(overrides)
    return PipelineSettings(**values)


def test_full_run_on_synthetic_mnist(tmp_path: Path) -> None:
    """An end-to-end run writes every checkpoint, metric file and report."""
    write_synthetic_dataset("mnist", tmp_path / "data", train_size=120, test_size=40)
    settings = _settings(tmp_path, val_size=20)
    bundle = run_pipeline(settings)

    run_dir = run_dir_for(settings)
    assert bundle.run_dir == run_dir
    for name in ("best_model1", "best_model2", "best_s2_head", "best_s2_full", "s2_full", "final"):
        assert checkpoint_exists(run_dir / "checkpoints" / name), name
    for fold in range(2):
        assert checkpoint_exists(run_dir / "checkpoints" / f"fold{fold}_best")

    metrics = {p.stem for p in (run_dir / "metrics").glob("*.csv")}
    assert metrics == {"s1_dual", "s2_head", "s2_full", "s3_fold0", "s3_fold1"}
    for name in ("run.json", "results.json", "summary.json", "confusion.csv", "classification_report.txt"):
        assert (run_dir / name).exists(), name

    assert bundle.size is not None and bundle.size.params.count == 14_862
    assert bundle.test_accuracy is not None and 0.0 <= bundle.test_accuracy <= 1.0
    assert int(bundle.confusion.sum()) == 40
    assert len(bundle.fold_test_accuracies) == 2
    assert bundle.class_names == tuple(str(i) for i in range(10))

    manifest = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    assert manifest["config_hash"] == settings.config_hash()
    assert manifest["stages"] == ["s1_dual", "s2_head", "s2_full", "s3_fold0", "s3_fold1"]
    assert "numpy" in manifest["versions"]


def test_stages_resume_across_invocations(tmp_path: Path) -> None:
    """s1, s2 and s3 can run as separate invocations sharing one run directory."""
    settings = _settings(tmp_path)
    first = Pipeline(settings, data_loader=_tiny_loader).run("s1")
    assert list(first.histories) == ["s1_dual"]
    assert first.test_accuracy is None

    second = Pipeline(settings, data_loader=_tiny_loader).run("s2")
    assert list(second.histories) == ["s1_dual", "s2_head", "s2_full"]
    assert second.test_accuracy is not None

    third = Pipeline(settings, data_loader=_tiny_loader).run("s3")
    assert list(third.histories)[-2:] == ["s3_fold0", "s3_fold1"]
    assert len(third.fold_test_accuracies) == 2

    reloaded = load_run_bundle(run_dir_for(settings))
    assert list(reloaded.histories) == list(third.histories)
    assert reloaded.test_accuracy == pytest.approx(third.test_accuracy)


def test_final_model_keeps_s1_branch_kernels(tmp_path: Path) -> None:
    """Stage s2 starts from the per-output checkpoints of stage s1."""
    settings = _settings(tmp_path, s2_head_epochs=0, s2_full_epochs=0)
    pipeline = Pipeline(settings, data_loader=_tiny_loader)
    pipeline.run("s1")
    model = pipeline.stage_s2()
    for prefix, name in (("model1", "best_model1"), ("model2", "best_model2")):
        branch = load_checkpoint(pipeline.checkpoint_dir / name)
        np.testing.assert_array_equal(
            model.node(f"{prefix}/conv1").layer.parameters()["kernels"],
            branch.node(f"{prefix}/conv1").layer.parameters()["kernels"],
        )


def test_resumed_s3_continues_s2_full_optimizer_state(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    """The SGD velocity saved with s2_full seeds the k-fold optimizer."""
    settings = _settings(tmp_path)
    Pipeline(settings, data_loader=_tiny_loader).run("s1")
    pipeline = Pipeline(settings, data_loader=_tiny_loader)
    model = pipeline.stage_s2()

    saved = read_checkpoint(pipeline.checkpoint_dir / "s2_full").optimizer_state
    assert saved is not None and saved["kind"] == "sgd"
    velocity = saved["slots"]["velocity"]
    assert set(velocity) == {node.name for node in model.parameterized_nodes()}
    assert any(np.any(v != 0) for params in velocity.values() for v in params.values())

    seen = []

    def recording_fit(model, train_feed, val_feed, optimizer, plan, **kwargs):
        seen.append(optimizer.state_dict())
        return fit(model, train_feed, val_feed, optimizer, plan, **kwargs)

    monkeypatch.setattr(pipeline_module, "fit", recording_fit)
    Pipeline(settings, data_loader=_tiny_loader).run("s3")

    first = seen[0]["slots"]["velocity"]
    for node, params in velocity.items():
        for key, value in params.items():
            np.testing.assert_array_equal(first[node][key], value)
    assert read_checkpoint(run_dir_for(settings) / "checkpoints" / "final").optimizer_state is not None


def test_runs_are_reproducible(tmp_path: Path) -> None:
    """Same settings and seed give the same weights and test accuracy."""
    results = []
    for name in ("a", "b"):
        settings = _settings(tmp_path / name, folds=2)
        bundle = run_pipeline(settings, "all", data_loader=_tiny_loader)
        model = load_checkpoint(run_dir_for(settings) / "checkpoints" / "final")
        results.append((bundle.test_accuracy, model.get_weights()))
    assert results[0][0] == results[1][0]
    for left, right in zip(results[0][1], results[1][1], strict=True):
        np.testing.assert_array_equal(left, right)


def test_s2_without_s1_checkpoints_fails(tmp_path: Path) -> None:
    with pytest.raises(PipelineStageError) as excinfo:
        Pipeline(_settings(tmp_path), data_loader=_tiny_loader).run("s2")
    assert excinfo.value.stage == "s2"
    assert (excinfo.value.run_dir / "run.json").exists()


def test_s3_without_s2_checkpoint_fails(tmp_path: Path) -> None:
    with pytest.raises(PipelineStageError) as excinfo:
        Pipeline(_settings(tmp_path), data_loader=_tiny_loader).run("s3")
    assert excinfo.value.stage == "s3"


def test_data_errors_are_wrapped_with_stage(tmp_path: Path) -> None:
    """A missing dataset surfaces as a stage failure carrying the original error."""
    with pytest.raises(PipelineStageError) as excinfo:
        run_pipeline(_settings(tmp_path), "s1")
    assert excinfo.value.stage == "s1"
    assert isinstance(excinfo.value.__cause__, DatasetNotFoundError)


def test_unknown_stage(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        Pipeline(_settings(tmp_path), data_loader=_tiny_loader).run("s4")


def test_invalid_settings_rejected_before_run(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        Pipeline(_settings(tmp_path, folds=1), data_loader=_tiny_loader)


def test_pool_recombines_train_and_val() -> None:
    data = _tiny_loader(PipelineSettings())
    assert len(data.pool) == 60
    np.testing.assert_array_equal(data.pool.images[40:], data.val.images)
    assert data.input_shape == (12, 12, 1)
