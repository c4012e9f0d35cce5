"""Loss, accuracy, confusion matrices, classification reports, and metric history."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from featherlite.utils import ensure_dir

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
PROB_SUM_TOLERANCE = 1e-5


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64, copy=False)


def sparse_ce_loss(probs: np.ndarray, label: int) -> float:
    """Cross-entropy of one probability vector against a class index.

    ``-ln(max(probs[label], 1e-12))``.

    Raises:
        ValueError: If ``label`` is out of range or ``probs`` does not sum to 1.
    """
    probs = np.asarray(probs)
    if not 0 <= int(label) < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    if abs(float(probs.sum()) - 1.0) > PROB_SUM_TOLERANCE:
        raise ValueError(f"probabilities sum to {float(probs.sum())}, expected 1")
    return float(-math.log(max(float(probs[int(label)]), PROB_CLAMP)))


def sparse_ce_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the softmax logits.

    Args:
        probs: ``[N, K]`` softmax outputs.
        labels: ``[N]`` class indices.

    Returns:
        ``(loss, grad)`` where ``grad = (probs - onehot(labels)) / N``.
    """
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"expected probs [N, K] and labels [N], got {probs.shape} and {labels.shape}")
    labels = _check_labels(labels, probs.shape[1])
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_CLAMP))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


def predict_classes(probs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(probs, axis=-1)


def accuracy(predictions: Sequence[int] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Fraction of ``predictions`` equal to ``labels``.

    Raises:
        ValueError: On empty input or length mismatch.
    """
    preds = np.asarray(predictions)
    truth = np.asarray(labels)
    if preds.shape != truth.shape:
        raise ValueError(f"predictions {preds.shape} and labels {truth.shape} differ in length")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == truth))


def confusion_matrix(
    labels: np.ndarray, predictions: np.ndarray, num_classes: int = 10
) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    truth = _check_labels(np.asarray(labels), num_classes)
    preds = _check_labels(np.asarray(predictions), num_classes)
    if truth.shape != preds.shape:
        raise ValueError(f"labels {truth.shape} and predictions {preds.shape} differ in length")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (truth, preds), 1)
    return matrix


def confusion_to_csv(confusion: np.ndarray, path: Path, class_names: Sequence[str] | None = None) -> Path:
    """Write a confusion matrix as CSV (header row of predicted labels)."""
    ensure_dir(path.parent)
    labels = list(class_names) if class_names else [str(i) for i in range(confusion.shape[0])]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred", *labels])
        for label, row in zip(labels, confusion, strict=True):
            writer.writerow([label, *(int(v) for v in row)])
    logger.debug("Wrote confusion matrix to %s", path)
    return path


def read_confusion_csv(path: Path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)


@dataclass(frozen=True, slots=True)
class ClassMetrics:
    """Precision, recall, F1, and support for one class.

    ``undefined`` is set when a zero denominator forced a metric to 0.
    """

    label: str
    precision: float
    recall: float
    f1: float
    support: int
    undefined: bool = False


@dataclass
class ClassificationReport:
    """Per-class metrics with macro/weighted averages and overall accuracy."""

    classes: list[ClassMetrics]
    macro: ClassMetrics
    weighted: ClassMetrics
    accuracy: float
    total: int

    def render_text(self, title: str | None = None) -> str:
        """Aligned plain-text table, two decimals, class index rows."""
        width = max(12, *(len(c.label) for c in self.classes))
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'':>{width}}  {'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}  {'Support':>9}")
        lines.append("")
        for row in self.classes:
            flag = " *" if row.undefined else ""
            lines.append(
                f"{row.label:>{width}}  {row.precision:>9.2f}  {row.recall:>9.2f}  "
                f"{row.f1:>9.2f}  {row.support:>9,}{flag}"
            )
        lines.append("")
        lines.append(f"{'Accuracy':>{width}}  {self.accuracy:.2f} ({self.total:,} samples)")
        for row in (self.macro, self.weighted):
            lines.append(
                f"{row.label:>{width}}  {row.precision:>9.2f}  {row.recall:>9.2f}  "
                f"{row.f1:>9.2f}  {row.support:>9,}"
            )
        if any(row.undefined for row in self.classes):
            lines.append("")
            lines.append("* zero denominator: metric reported as 0.00")
        return "\n".join(lines) + "\n"

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict[str, Any]:
        def _row(row: ClassMetrics) -> dict[str, Any]:
            return {
                "precision": row.precision,
                "recall": row.recall,
                "f1": row.f1,
                "support": row.support,
                "undefined": row.undefined,
            }

        classes = []
        for index, row in enumerate(self.classes):
            entry = {"label": row.label, **_row(row)}
            if class_names:
                entry["name"] = class_names[index]
            classes.append(entry)
        return {
            "classes": classes,
            "macro_avg": _row(self.macro),
            "weighted_avg": _row(self.weighted),
            "accuracy": self.accuracy,
            "total": self.total,
        }


def _ratio(numerator: float, denominator: float) -> tuple[float, bool]:
    if denominator == 0:
        return 0.0, True
    return numerator / denominator, False


def classification_report(confusion: np.ndarray) -> ClassificationReport:
    """Build a report from a confusion matrix (rows = true class).

    precision = diag / column sum, recall = diag / row sum; zero denominators
    give 0 with the ``undefined`` flag. Macro averages are unweighted class
    means; weighted averages use class support.
    """
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1] or np.any(confusion < 0):
        raise ValueError("confusion matrix must be square with non-negative counts")
    diag = np.diag(confusion).astype(np.float64)
    row_sums = confusion.sum(axis=1)
    col_sums = confusion.sum(axis=0)
    total = int(confusion.sum())
    classes = []
    for index in range(confusion.shape[0]):
        precision, p_undef = _ratio(diag[index], col_sums[index])
        recall, r_undef = _ratio(diag[index], row_sums[index])
        f1, f_undef = _ratio(2 * precision * recall, precision + recall)
        classes.append(
            ClassMetrics(
                str(index), precision, recall, f1, int(row_sums[index]), p_undef or r_undef or f_undef
            )
        )
    support = np.array([c.support for c in classes], dtype=np.float64)
    stacked = np.array([[c.precision, c.recall, c.f1] for c in classes])
    macro = stacked.mean(axis=0)
    weighted = (stacked * support[:, None]).sum(axis=0) / total if total else np.zeros(3)
    return ClassificationReport(
        classes=classes,
        macro=ClassMetrics("Macro Avg", *map(float, macro), total),
        weighted=ClassMetrics("Weighted Avg", *map(float, weighted), total),
        accuracy=float(diag.sum() / total) if total else 0.0,
        total=total,
    )


@dataclass
class MetricsRecord:
    """Per-epoch metric history plus the final evaluation, if any.

    Epoch rows are dicts keyed like ``loss``, ``model1_accuracy``,
    ``val_accuracy``. Epochs are numbered from 1.
    """

    columns: list[str] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)
    confusion: np.ndarray | None = None
    report: ClassificationReport | None = None

    def append(self, epoch: int, metrics: dict[str, float]) -> None:
        for key in metrics:
            if key not in self.columns:
                self.columns.append(key)
        self.epochs.append(int(epoch))
        self.rows.append({key: float(value) for key, value in metrics.items()})

    def __len__(self) -> int:
        return len(self.rows)

    def series(self, key: str) -> list[float]:
        """Values of ``key`` for every epoch (NaN where missing)."""
        return [row.get(key, math.nan) for row in self.rows]

    def best(self, key: str) -> tuple[int, float]:
        """``(epoch, value)`` of the first maximum of ``key``."""
        values = self.series(key)
        if not values:
            raise ValueError(f"no history recorded for '{key}'")
        index = int(np.nanargmax(values))
        return self.epochs[index], values[index]

    def last(self) -> dict[str, float]:
        return dict(self.rows[-1]) if self.rows else {}

    def to_csv(self, path: Path) -> Path:
        """Write ``epoch`` plus every column; floats use ``repr`` so reads are exact."""
        ensure_dir(path.parent)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", *self.columns])
            for epoch, row in zip(self.epochs, self.rows, strict=True):
                writer.writerow([epoch, *(repr(row.get(key, math.nan)) for key in self.columns)])
        return path

    @classmethod
    def from_csv(cls, path: Path) -> MetricsRecord:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, ["epoch"])
            record = cls(columns=list(header[1:]))
            for values in reader:
                if not values:
                    continue
                record.epochs.append(int(values[0]))
                record.rows.append(
                    {key: float(value) for key, value in zip(record.columns, values[1:], strict=True)}
                )
        return record
