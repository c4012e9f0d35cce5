"""Report generation: metric CSVs, JSON summaries, and SVG charts.

A run directory is self-describing. ``run.json``, ``results.json``, the
per-stage metric CSVs and ``confusion.csv`` are the primary records; everything
else here is derived from them and can be regenerated with :func:`emit_reports`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

from featherlite.benchmark import (
    LatencyReport,
    SizeReport,
    ThroughputPoint,
    ThroughputReport,
    expected_batch1_rate,
)
from featherlite.lossmetrics import (
    ClassificationReport,
    MetricsRecord,
    classification_report,
    confusion_to_csv,
    read_confusion_csv,
)
from featherlite.netgraph import ParamCount
from featherlite.utils import ensure_dir, write_json

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run.json"
RESULTS_FILE = "results.json"
SUMMARY_FILE = "summary.json"
CONFUSION_CSV = "confusion.csv"
CONFUSION_SVG = "confusion.svg"
REPORT_TEXT = "classification_report.txt"
REPORT_JSON = "classification_report.json"
METRICS_DIR = "metrics"
CHECKPOINT_DIR = "checkpoints"
CHARTS_DIR = "charts"
BENCH_DIR = "bench"

_SVG_RC = {"svg.fonttype": "none", "svg.hashsalt": "featherlite"}


# Series CSV -------------------------------------------------------------------


def write_series_csv(path: Path, series: Mapping[str, Sequence[float]]) -> Path:
    """Write named columns of equal length; floats use ``repr`` so reads are exact.

    An empty mapping or zero-length columns give a header-only file.
    """
    lengths = {len(values) for values in series.values()}
    if len(lengths) > 1:
        raise ValueError(f"series columns differ in length: {sorted(lengths)}")
    ensure_dir(path.parent)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(series))
        for row in zip(*series.values(), strict=True):
            writer.writerow([repr(float(v)) for v in row])
    logger.debug("Wrote series CSV %s", path)
    return path


def read_series_csv(path: Path) -> dict[str, list[float]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, [])
        columns: dict[str, list[float]] = {key: [] for key in header}
        for row in reader:
            if not row:
                continue
            for key, value in zip(header, row, strict=True):
                columns[key].append(float(value))
    return columns


# Run bundle -------------------------------------------------------------------


@dataclass
class RunBundle:
    """Everything a finished (or partial) run produced."""

    run_dir: Path
    dataset: str
    class_names: tuple[str, ...] = ()
    manifest: dict[str, Any] = field(default_factory=dict)
    histories: dict[str, MetricsRecord] = field(default_factory=dict)
    best_epochs: dict[str, int | None] = field(default_factory=dict)
    test_loss: float | None = None
    test_accuracy: float | None = None
    confusion: np.ndarray | None = None
    fold_test_accuracies: list[float] = field(default_factory=list)
    size: SizeReport | None = None
    latency: LatencyReport | None = None
    throughput: dict[str, ThroughputReport] = field(default_factory=dict)

    @property
    def report(self) -> ClassificationReport | None:
        return classification_report(self.confusion) if self.confusion is not None else None

    @property
    def fold_spread(self) -> float | None:
        if not self.fold_test_accuracies:
            return None
        return max(self.fold_test_accuracies) - min(self.fold_test_accuracies)

    def results_dict(self) -> dict[str, Any]:
        """Primary numbers not recoverable from the CSVs."""
        return {
            "dataset": self.dataset,
            "class_names": list(self.class_names),
            "best_epochs": self.best_epochs,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "fold_test_accuracies": self.fold_test_accuracies,
            "params": self.size.params.count if self.size else None,
            "disk_bytes": self.size.disk_bytes if self.size else None,
        }


def write_results(bundle: RunBundle) -> list[Path]:
    """Write the primary records of ``bundle`` into its run directory."""
    written = [write_json(bundle.run_dir / RESULTS_FILE, bundle.results_dict())]
    for stage, history in bundle.histories.items():
        written.append(history.to_csv(bundle.run_dir / METRICS_DIR / f"{stage}.csv"))
    if bundle.confusion is not None:
        written.append(confusion_to_csv(bundle.confusion, bundle.run_dir / CONFUSION_CSV))
    return written


def _read_json(path: Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_latency(path: Path) -> LatencyReport:
    data = _read_json(path)
    return LatencyReport(**data)


def load_throughput(json_path: Path) -> ThroughputReport:
    data = _read_json(json_path)
    points = [ThroughputPoint(**p) for p in data.pop("points", [])]
    return ThroughputReport(points=points, **data)


def load_run_bundle(run_dir: Path) -> RunBundle:
    """Rebuild a :class:`RunBundle` from a run directory without retraining.

    Raises:
        FileNotFoundError: If ``run_dir`` holds no run manifest.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / RUN_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no {RUN_MANIFEST})")
    manifest = _read_json(manifest_path)
    results = _read_json(run_dir / RESULTS_FILE) if (run_dir / RESULTS_FILE).exists() else {}
    bundle = RunBundle(
        run_dir=run_dir,
        dataset=str(manifest.get("dataset", results.get("dataset", ""))),
        class_names=tuple(results.get("class_names", ())),
        manifest=manifest,
        best_epochs=dict(results.get("best_epochs", {})),
        test_loss=results.get("test_loss"),
        test_accuracy=results.get("test_accuracy"),
        fold_test_accuracies=list(results.get("fold_test_accuracies", [])),
    )
    if results.get("params") is not None:
        bundle.size = SizeReport(ParamCount(int(results["params"])), results.get("disk_bytes"))
    stage_order = {stage: index for index, stage in enumerate(manifest.get("stages", []))}
    metric_files = sorted(
        (run_dir / METRICS_DIR).glob("*.csv"),
        key=lambda p: (stage_order.get(p.stem, len(stage_order)), p.stem),
    )
    for path in metric_files:
        bundle.histories[path.stem] = MetricsRecord.from_csv(path)
    if (run_dir / CONFUSION_CSV).exists():
        bundle.confusion = read_confusion_csv(run_dir / CONFUSION_CSV)
    bench = run_dir / BENCH_DIR
    if (bench / "latency.json").exists():
        bundle.latency = load_latency(bench / "latency.json")
    for path in sorted(bench.glob("throughput*.json")):
        bundle.throughput[path.stem] = load_throughput(path)
    logger.debug("Loaded run bundle from %s (%d histories)", run_dir, len(bundle.histories))
    return bundle


# Charts -------------------------------------------------------------------


def _save_svg(fig: Figure, path: Path) -> Path:
    ensure_dir(path.parent)
    with rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    logger.debug("Wrote chart %s", path)
    return path


def _best_keys(history: MetricsRecord) -> list[str]:
    keys = [k for k in history.columns if k.startswith("val_") and k.endswith("_accuracy")]
    return keys if keys else [k for k in history.columns if k == "val_accuracy"]


def plot_training_curves(history: MetricsRecord, path: Path, *, title: str = "") -> Path | None:
    """Accuracy and loss per epoch, with each best validation epoch marked.

    Every series is drawn as one line whose SVG group id is ``series-<key>``.
    A dotted vertical line marks the best epoch of each per-output validation
    accuracy, annotated with its value. Returns None for an empty history.
    """
    if not len(history):
        logger.warning("No epochs recorded for %s; skipping chart", title or path.name)
        return None
    fig = Figure(figsize=(10, 4))
    acc_ax, loss_ax = fig.subplots(1, 2)
    for ax, suffix, label in ((acc_ax, "accuracy", "Accuracy"), (loss_ax, "loss", "Loss")):
        for key in (k for k in history.columns if k.endswith(suffix)):
            style = "--" if key.startswith("val_") else "-"
            ax.plot(
                history.epochs,
                history.series(key),
                style,
                marker="o",
                markersize=3,
                label=key,
                gid=f"series-{key}",
            )
        ax.set_xlabel("Epoch")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for key in _best_keys(history):
        epoch, value = history.best(key)
        acc_ax.axvline(epoch, linestyle=":", color="gray", linewidth=1.0, gid=f"best-{key}")
        acc_ax.annotate(
            f"{key}: {value:.4f} @ {epoch}",
            xy=(epoch, value),
            xytext=(4, -12),
            textcoords="offset points",
            fontsize=8,
        )
    acc_ax.legend(fontsize=7, loc="lower right")
    loss_ax.legend(fontsize=7, loc="upper right")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_throughput(report: ThroughputReport, path: Path, latency: LatencyReport | None = None) -> Path:
    """Samples per second against batch size, with standard-deviation error bars.

    With a single-thread sweep and a ``latency`` report, a dashed line marks
    the batch-1 rate the latency mean implies.
    """
    fig = Figure(figsize=(7, 4))
    ax = fig.subplots()
    sizes = report.batch_sizes
    ax.errorbar(
        sizes,
        [p.mean_samples_per_sec for p in report.points],
        yerr=[p.std_samples_per_sec for p in report.points],
        marker="o",
        capsize=3,
        gid="series-throughput",
        label="measured",
    )
    if latency is not None and report.threads == 1:
        rate = expected_batch1_rate(latency)
        if math.isfinite(rate):
            ax.axhline(
                rate,
                color="gray",
                linestyle="--",
                gid="expected-batch1",
                label=f"1000 / latency ({rate:,.0f})",
            )
            ax.legend(loc="best", fontsize=8)
    if sizes:
        ax.set_xscale("log", base=2)
    ax.set_xlabel("Batch size")
    ax.set_ylabel("Samples / second")
    threads = "single thread" if report.threads == 1 else f"{report.threads} threads"
    ax.set_title(f"Throughput ({report.dataset or 'model'}, {threads}, {report.termination})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_confusion(confusion: np.ndarray, path: Path, class_names: Sequence[str] | None = None) -> Path:
    """Heat map of a confusion matrix (rows true, columns predicted) with counts."""
    n = confusion.shape[0]
    labels = list(class_names) if class_names else [str(i) for i in range(n)]
    fig = Figure(figsize=(7, 6))
    ax = fig.subplots()
    image = ax.imshow(confusion, cmap="Blues")
    fig.colorbar(image, ax=ax)
    ax.set_xticks(range(n), labels=labels, rotation=45, ha="right")
    ax.set_yticks(range(n), labels=labels)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    threshold = confusion.max() / 2.0 if confusion.size else 0
    for i in range(n):
        for j in range(n):
            color = "white" if confusion[i, j] > threshold else "black"
            ax.text(j, i, f"{int(confusion[i, j])}", ha="center", va="center", fontsize=7, color=color)
    fig.tight_layout()
    return _save_svg(fig, path)


# Emission -------------------------------------------------------------------


def emit_benchmark_reports(
    out_dir: Path,
    *,
    latency: LatencyReport | None = None,
    throughput: ThroughputReport | None = None,
    size: SizeReport | None = None,
) -> list[Path]:
    """Write ``latency.json``, ``throughput.csv``/``.json``/``.svg`` and ``size.json``.

    A multi-thread sweep is written under ``throughput_threads<N>.*`` so it is
    never mixed with the single-thread table.
    """
    out_dir = ensure_dir(Path(out_dir))
    written: list[Path] = []
    if latency is not None:
        written.append(write_json(out_dir / "latency.json", latency.to_dict()))
    if throughput is not None:
        stem = "throughput" if throughput.threads == 1 else f"throughput_threads{throughput.threads}"
        written.append(write_series_csv(out_dir / f"{stem}.csv", throughput.series()))
        written.append(write_json(out_dir / f"{stem}.json", throughput.to_dict()))
        written.append(plot_throughput(throughput, out_dir / f"{stem}.svg", latency=latency))
    if size is not None:
        written.append(write_json(out_dir / "size.json", size.to_dict()))
    logger.info("Wrote %d benchmark files to %s", len(written), out_dir)
    return written


def summary_dict(bundle: RunBundle) -> dict[str, Any]:
    """JSON summary: accuracy, parameters, size, latency, throughput, report."""
    report = bundle.report
    return {
        "dataset": bundle.dataset,
        "seed": bundle.manifest.get("seed"),
        "config_hash": bundle.manifest.get("config_hash"),
        "versions": bundle.manifest.get("versions", {}),
        "stages": bundle.manifest.get("stages", []),
        "test": {"accuracy": bundle.test_accuracy, "loss": bundle.test_loss},
        "folds": {"test_accuracies": bundle.fold_test_accuracies, "spread": bundle.fold_spread},
        "best_epochs": bundle.best_epochs,
        "size": bundle.size.to_dict() if bundle.size else None,
        "latency": bundle.latency.to_dict() if bundle.latency else None,
        "throughput": {key: value.to_dict() for key, value in bundle.throughput.items()},
        "classification_report": report.to_dict(bundle.class_names or None) if report else None,
    }


def emit_reports(bundle: RunBundle, out_dir: Path | None = None) -> list[Path]:
    """Write every derived file for ``bundle``; returns the written paths.

    Args:
        bundle: Run results.
        out_dir: Target directory (defaults to the run directory).
    """
    out_dir = ensure_dir(Path(out_dir) if out_dir is not None else bundle.run_dir)
    written: list[Path] = []
    for stage, history in bundle.histories.items():
        written.append(history.to_csv(out_dir / METRICS_DIR / f"{stage}.csv"))
        chart = plot_training_curves(history, out_dir / CHARTS_DIR / f"{stage}.svg", title=stage)
        if chart is not None:
            written.append(chart)
    report = bundle.report
    if bundle.confusion is not None and report is not None:
        written.append(confusion_to_csv(bundle.confusion, out_dir / CONFUSION_CSV))
        written.append(plot_confusion(bundle.confusion, out_dir / CONFUSION_SVG, bundle.class_names or None))
        text_path = out_dir / REPORT_TEXT
        text_path.write_text(report.render_text(f"{bundle.dataset} test set"), encoding="utf-8")
        written.append(text_path)
        written.append(write_json(out_dir / REPORT_JSON, report.to_dict(bundle.class_names or None)))
    for key, sweep in bundle.throughput.items():
        written.append(plot_throughput(sweep, out_dir / BENCH_DIR / f"{key}.svg", latency=bundle.latency))
    written.append(write_json(out_dir / SUMMARY_FILE, summary_dict(bundle)))
    logger.info("Wrote %d report files to %s", len(written), out_dir)
    return written


def format_run_summary(bundle: RunBundle) -> str:
    """Short human-readable summary printed by the CLI."""
    lines = [f"Run: {bundle.run_dir}", f"Dataset: {bundle.dataset}"]
    for stage, epoch in bundle.best_epochs.items():
        lines.append(f"  {stage}: best epoch {epoch}")
    if bundle.test_accuracy is not None:
        total = int(bundle.confusion.sum()) if bundle.confusion is not None else 0
        lines.append(f"Test accuracy: {bundle.test_accuracy:.4f} ({total:,} samples)")
    if bundle.fold_test_accuracies:
        folds = ", ".join(f"{a:.4f}" for a in bundle.fold_test_accuracies)
        lines.append(f"Fold test accuracies: {folds} (spread {bundle.fold_spread:.4f})")
    if bundle.size is not None:
        lines.append(f"Parameters: {bundle.size.summary_line()}")
        if bundle.size.disk_bytes is not None:
            lines.append(f"Checkpoint size: {bundle.size.disk_bytes / 1024.0**2:.3f} MB")
    if bundle.latency is not None and not math.isnan(bundle.latency.mean_ms):
        lines.append(f"Latency: {bundle.latency.mean_ms:.3f} ms (std {bundle.latency.std_ms:.3f})")
    return "\n".join(lines) + "\n"
