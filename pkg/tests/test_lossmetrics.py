"""Tests for loss, accuracy, confusion matrices, reports, and metric history."""

import math
from pathlib import Path

import numpy as np
import pytest

from featherlite.layers.activations import softmax
from featherlite.lossmetrics import (
    MetricsRecord,
    accuracy,
    classification_report,
    confusion_matrix,
    confusion_to_csv,
    predict_classes,
    read_confusion_csv,
    sparse_ce_batch,
    sparse_ce_loss,
)


def test_sparse_ce_loss_closed_forms() -> None:
    assert sparse_ce_loss(np.eye(10)[3], 3) == pytest.approx(0.0)
    assert sparse_ce_loss(np.full(10, 0.1), 7) == pytest.approx(math.log(10), abs=1e-6)


def test_sparse_ce_loss_clamps_confident_wrong_prediction() -> None:
    assert sparse_ce_loss(np.eye(10)[0], 1) == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize(("probs", "label"), [(np.full(10, 0.1), 10), (np.full(10, 0.2), 0)])
def test_sparse_ce_loss_rejects_bad_input(probs: np.ndarray, label: int) -> None:
    with pytest.raises(ValueError):
        sparse_ce_loss(probs, label)


def test_softmax_cross_entropy_gradient_matches_finite_differences() -> None:
    gen = np.random.default_rng(0)
    logits = gen.normal(size=(100, 10)) * 3
    labels = gen.integers(0, 10, size=100)
    _, grad = sparse_ce_batch(softmax(logits), labels)
    eps = 1e-6
    numeric = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            logits[i, j] += eps
            plus = sparse_ce_batch(softmax(logits), labels)[0]
            logits[i, j] -= 2 * eps
            minus = sparse_ce_batch(softmax(logits), labels)[0]
            logits[i, j] += eps
            numeric[i, j] = (plus - minus) / (2 * eps)
    rel = np.max(np.abs(grad - numeric)) / np.max(np.abs(grad) + np.abs(numeric))
    assert rel < 1e-4


def test_predict_classes_ties_pick_lowest_index() -> None:
    np.testing.assert_array_equal(predict_classes(np.array([[0.5, 0.5], [0.2, 0.8]])), [0, 1])


def test_accuracy() -> None:
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([1, 2, 0], [1, 2, 3]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_confusion_matrix_counts() -> None:
    labels = np.array([0, 0, 1, 2, 2, 2])
    preds = np.array([0, 1, 1, 2, 0, 2])
    matrix = confusion_matrix(labels, preds, num_classes=3)
    np.testing.assert_array_equal(matrix, [[1, 1, 0], [0, 1, 0], [1, 0, 2]])
    assert matrix.sum() == labels.size


def test_report_on_diagonal_matrix_is_perfect() -> None:
    report = classification_report(np.diag([5, 3, 7]))
    assert report.accuracy == 1.0
    for row in report.classes:
        assert (row.precision, row.recall, row.f1) == (1.0, 1.0, 1.0)


def test_report_two_class_hand_arithmetic() -> None:
    report = classification_report(np.array([[8, 2], [3, 7]]))
    first = report.classes[0]
    assert first.precision == pytest.approx(8 / 11)
    assert first.recall == pytest.approx(0.8)
    assert first.support == 10
    assert report.accuracy == pytest.approx(0.75)


def test_weighted_recall_equals_accuracy() -> None:
    gen = np.random.default_rng(3)
    labels = gen.integers(0, 10, size=500)
    preds = np.where(gen.random(500) < 0.7, labels, gen.integers(0, 10, size=500))
    report = classification_report(confusion_matrix(labels, preds))
    assert report.weighted.recall == pytest.approx(report.accuracy, abs=1e-12)
    assert report.total == 500


def test_zero_support_class_is_flagged() -> None:
    confusion = np.array([[4, 0, 0], [0, 3, 0], [0, 0, 0]])
    report = classification_report(confusion)
    empty = report.classes[2]
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)
    assert empty.undefined
    text = report.render_text("test set")
    assert "zero denominator" in text
    assert "nan" not in text.lower()


def test_report_text_layout_is_deterministic() -> None:
    confusion = np.array([[8, 2], [3, 7]])
    text = classification_report(confusion).render_text("demo")
    assert text == classification_report(confusion).render_text("demo")
    lines = text.splitlines()
    assert lines[0] == "demo"
    assert "Precision" in lines[1] and "Support" in lines[1]
    assert any(line.strip().startswith("0") and "0.73" in line and "0.80" in line for line in lines)


def test_report_to_dict_with_class_names() -> None:
    data = classification_report(np.array([[8, 2], [3, 7]])).to_dict(["cat", "dog"])
    assert [c["name"] for c in data["classes"]] == ["cat", "dog"]
    assert data["total"] == 20
    assert set(data["macro_avg"]) == {"precision", "recall", "f1", "support", "undefined"}


def test_confusion_csv_round_trip(tmp_path: Path) -> None:
    matrix = np.array([[8, 2], [3, 7]])
    path = confusion_to_csv(matrix, tmp_path / "confusion.csv")
    assert path.read_text(encoding="utf-8").splitlines()[0] == "true\\pred,0,1"
    np.testing.assert_array_equal(read_confusion_csv(path), matrix)


def test_metrics_record_best_and_csv(tmp_path: Path) -> None:
    record = MetricsRecord()
    for epoch, value in enumerate([0.5, 0.7, 0.7, 0.6], start=1):
        record.append(epoch, {"loss": 1.0 / epoch, "val_accuracy": value})
    assert len(record) == 4
    assert record.best("val_accuracy") == (2, 0.7)
    assert record.last()["val_accuracy"] == 0.6

    restored = MetricsRecord.from_csv(record.to_csv(tmp_path / "history.csv"))
    assert restored.columns == ["loss", "val_accuracy"]
    assert restored.epochs == [1, 2, 3, 4]
    assert restored.series("loss") == record.series("loss")


def test_metrics_record_empty_csv_has_header_only(tmp_path: Path) -> None:
    path = MetricsRecord().to_csv(tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8").splitlines() == ["epoch"]
    assert len(MetricsRecord.from_csv(path)) == 0
    with pytest.raises(ValueError):
        MetricsRecord().best("val_accuracy")
