"""Epoch loop, early stopping and checkpoint callbacks, stage plans, evaluation."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
from tqdm import tqdm

from featherlite.checkpoint import save_checkpoint
from featherlite.dataio import Dataset, SingleFeed
from featherlite.lossmetrics import (
    ClassificationReport,
    MetricsRecord,
    classification_report,
    confusion_matrix,
    predict_classes,
    sparse_ce_batch,
)
from featherlite.netgraph import ModelGraph, extract_branch
from featherlite.optim import Optimizer
from featherlite.tensor import NonFiniteError, RngStream

if TYPE_CHECKING:
    from featherlite.pipeline_settings import PipelineSettings

logger = logging.getLogger(__name__)

STAGE_S1 = "s1_dual"
STAGE_S2_HEAD = "s2_head"
STAGE_S2_FULL = "s2_full"
STAGE_S3 = "s3_kfold"


class NonFiniteLossError(NonFiniteError):
    """Training produced a NaN/Inf loss.

    Attributes:
        epoch: 1-based epoch of the failing batch.
        batch: 0-based batch index within the epoch.
        node: First graph value holding a non-finite entry, if any.
    """

    def __init__(self, epoch: int, batch: int, node: str | None):
        where = node or "loss"
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (first non-finite value: {where})",
            where=where,
        )
        self.epoch = epoch
        self.batch = batch
        self.node = node


class Feed(Protocol):
    n_inputs: int

    def __len__(self) -> int: ...

    def batches(self, batch_size: int, *, shuffle: bool = True, seed: int = 0, epoch: int = 0) -> Any: ...


# Callbacks ------------------------------------------------------------------


@dataclass
class EarlyStopConfig:
    """Early-stopping rule.

    ``strategy="mean"`` watches ``monitor`` alone. ``strategy="all"`` watches
    every key in ``monitors`` and stops only once each has gone ``patience``
    epochs without improving; weights are still restored to the best
    ``monitor`` epoch.
    """

    patience: int = 5
    monitor: str = "val_accuracy"
    mode: str = "max"
    restore_best_weights: bool = True
    min_delta: float = 0.001
    strategy: str = "mean"
    monitors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.patience < 1 or self.min_delta < 0:
            raise ValueError(
                f"patience must be >= 1 and min_delta >= 0, got {self.patience}, {self.min_delta}"
            )
        if self.mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {self.mode!r}")
        if self.strategy not in ("mean", "all"):
            raise ValueError(f"strategy must be 'mean' or 'all', got {self.strategy!r}")


class _Tracker:
    """Best value and epochs-since-improvement for one metric."""

    def __init__(self, mode: str, min_delta: float):
        self.sign = 1.0 if mode == "max" else -1.0
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        score = self.sign * value
        if score > self.best + self.min_delta:
            self.best = score
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def best_value(self) -> float:
        return self.sign * self.best


@dataclass(frozen=True)
class EarlyStopDecision:
    stop: bool
    stop_epoch: int | None
    best_epoch: int | None
    best_value: float


def early_stopping(history: Sequence[float], cfg: EarlyStopConfig) -> EarlyStopDecision:
    """Replay ``history`` (epoch 1 first) through the early-stopping rule.

    Improvement means ``value > best + min_delta``; training stops after
    ``patience`` consecutive epochs without one.
    """
    if not history:
        raise ValueError("early stopping needs at least one epoch of history")
    tracker = _Tracker(cfg.mode, cfg.min_delta)
    for epoch, value in enumerate(history, start=1):
        tracker.update(epoch, float(value))
        if tracker.wait >= cfg.patience:
            return EarlyStopDecision(True, epoch, tracker.best_epoch, tracker.best_value)
    return EarlyStopDecision(False, None, tracker.best_epoch, tracker.best_value)


class Callback:
    def set_optimizer(self, optimizer: Optimizer) -> None:
        pass

    def on_train_begin(self, model: ModelGraph) -> None:
        pass

    def on_epoch_end(self, epoch: int, logs: dict[str, float], model: ModelGraph) -> bool:
        """Return True to stop training."""
        return False

    def on_train_end(self, model: ModelGraph) -> None:
        pass


class EarlyStopping(Callback):
    """Stops on stalled validation metrics and restores the best weights."""

    def __init__(self, cfg: EarlyStopConfig | None = None):
        self.cfg = cfg or EarlyStopConfig()
        self._reset()

    def _reset(self) -> None:
        self.tracker = _Tracker(self.cfg.mode, self.cfg.min_delta)
        keys = self.cfg.monitors if self.cfg.strategy == "all" else ()
        self.extra = {key: _Tracker(self.cfg.mode, self.cfg.min_delta) for key in keys}
        self.best_weights: list[np.ndarray] | None = None
        self.stopped_epoch: int | None = None

    @property
    def best_epoch(self) -> int | None:
        return self.tracker.best_epoch

    def on_train_begin(self, model: ModelGraph) -> None:
        self._reset()

    def on_epoch_end(self, epoch: int, logs: dict[str, float], model: ModelGraph) -> bool:
        if self.cfg.monitor not in logs:
            raise KeyError(f"early stopping monitor '{self.cfg.monitor}' not in logs {sorted(logs)}")
        if self.tracker.update(epoch, logs[self.cfg.monitor]) and self.cfg.restore_best_weights:
            self.best_weights = model.get_weights()
        for key, tracker in self.extra.items():
            tracker.update(epoch, logs[key])
        if self.extra:
            stop = all(t.wait >= self.cfg.patience for t in self.extra.values())
        else:
            stop = self.tracker.wait >= self.cfg.patience
        if stop:
            self.stopped_epoch = epoch
            logger.info(
                "Early stopping at epoch %d: best %s=%.4f at epoch %s",
                epoch,
                self.cfg.monitor,
                self.tracker.best_value,
                self.tracker.best_epoch,
            )
        return stop

    def on_train_end(self, model: ModelGraph) -> None:
        if self.cfg.restore_best_weights and self.best_weights is not None:
            model.set_weights(self.best_weights)
            logger.info("Restored weights from epoch %s", self.tracker.best_epoch)


class ModelCheckpoint(Callback):
    """Save the model whenever ``monitor`` strictly exceeds its previous best.

    With ``branch`` set, only that branch of a dual model is saved. The
    optimizer state of the saved nodes goes into the checkpoint too, so
    training can resume from it with warm moment buffers.
    """

    def __init__(self, path: Path, monitor: str, *, branch: str | None = None):
        self.path = Path(path)
        self.monitor = monitor
        self.branch = branch
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.optimizer: Optimizer | None = None

    def set_optimizer(self, optimizer: Optimizer) -> None:
        self.optimizer = optimizer

    def _optimizer_state(self) -> dict[str, Any] | None:
        if self.optimizer is None:
            return None
        state = self.optimizer.state_dict()
        if self.branch:
            prefix = f"{self.branch}/"
            state["slots"] = {
                slot: {node: params for node, params in per_node.items() if node.startswith(prefix)}
                for slot, per_node in state["slots"].items()
            }
        return state

    def on_train_begin(self, model: ModelGraph) -> None:
        self.best = -math.inf
        self.best_epoch = None

    def on_epoch_end(self, epoch: int, logs: dict[str, float], model: ModelGraph) -> bool:
        if self.monitor not in logs:
            raise KeyError(f"checkpoint monitor '{self.monitor}' not in logs {sorted(logs)}")
        value = logs[self.monitor]
        if value > self.best:
            logger.info(
                "Epoch %d: %s improved from %.4f to %.4f, saving %s",
                epoch,
                self.monitor,
                self.best,
                value,
                self.path.name,
            )
            self.best = value
            self.best_epoch = epoch
            graph = extract_branch(model, self.branch) if self.branch else model
            save_checkpoint(
                graph,
                self.path,
                metadata={"monitor": self.monitor, "value": value, "epoch": epoch},
                optimizer_state=self._optimizer_state(),
            )
        return False


# Stage plans ------------------------------------------------------------------


@dataclass
class StagePlan:
    """How one pipeline stage trains.

    Attributes:
        stage: Stage id (``s1_dual``, ``s2_head``, ``s2_full``, ``s3_kfold``).
        optimizer: ``nadam`` or ``sgd``.
        optimizer_hyper: Keyword arguments for the optimizer.
        epochs: Epoch cap.
        freeze: ``head_only`` or ``all_trainable``; None leaves the graph as is.
        data: ``paired`` (original + augmented) or ``single`` (original only).
        early_stop: Early-stopping rule.
        checkpoints: Checkpoint name mapped to the monitored key.
    """

    stage: str
    optimizer: str
    optimizer_hyper: dict[str, Any]
    epochs: int
    freeze: str | None
    data: str
    early_stop: EarlyStopConfig
    checkpoints: dict[str, str] = field(default_factory=dict)


def default_stage_plans(settings: PipelineSettings | None = None) -> dict[str, StagePlan]:
    """Plans for S1 dual, S2 head, S2 full, and each S3 fold (caps 20/20/50/10)."""
    if settings is None:
        from featherlite.pipeline_settings import PipelineSettings

        settings = PipelineSettings()
    nadam = {"lr": settings.nadam_lr}
    sgd = {
        "lr": settings.sgd_lr,
        "momentum": settings.momentum,
        "weight_decay": settings.weight_decay,
        "nesterov": settings.nesterov,
        "decoupled_weight_decay": settings.decoupled_weight_decay,
    }

    def _stop(**extra: Any) -> EarlyStopConfig:
        return EarlyStopConfig(patience=settings.patience, min_delta=settings.min_delta, **extra)

    return {
        STAGE_S1: StagePlan(
            STAGE_S1,
            "nadam",
            nadam,
            settings.scaled_epochs(settings.s1_epochs),
            None,
            "paired",
            _stop(
                strategy=settings.dual_monitor,
                monitors=("val_model1_accuracy", "val_model2_accuracy"),
            ),
            {"best_model1": "val_model1_accuracy", "best_model2": "val_model2_accuracy"},
        ),
        STAGE_S2_HEAD: StagePlan(
            STAGE_S2_HEAD,
            "nadam",
            nadam,
            settings.scaled_epochs(settings.s2_head_epochs),
            "head_only",
            "single",
            _stop(),
            {"best_s2_head": "val_accuracy"},
        ),
        STAGE_S2_FULL: StagePlan(
            STAGE_S2_FULL,
            "sgd",
            sgd,
            settings.scaled_epochs(settings.s2_full_epochs),
            "all_trainable",
            "single",
            _stop(),
            {"best_s2_full": "val_accuracy"},
        ),
        STAGE_S3: StagePlan(
            STAGE_S3,
            "sgd",
            sgd,
            settings.scaled_epochs(settings.s3_epochs),
            "all_trainable",
            "single",
            _stop(),
            {"best_fold": "val_accuracy"},
        ),
    }


# Fit / evaluate ---------------------------------------------------------------


@dataclass
class FitResult:
    model: ModelGraph
    history: MetricsRecord
    stopped_epoch: int | None = None
    best_epoch: int | None = None
    checkpoints: dict[str, Path] = field(default_factory=dict)
    optimizer: Optimizer | None = None


def _metric_keys(model: ModelGraph) -> list[str]:
    names = model.output_names
    return [] if len(names) == 1 else names


def _summarize(
    model: ModelGraph, losses: np.ndarray, correct: np.ndarray, count: int, prefix: str = ""
) -> dict[str, float]:
    per_output = _metric_keys(model)
    logs: dict[str, float] = {f"{prefix}loss": float(losses.sum() / count)}
    accuracies = correct / count
    for index, name in enumerate(per_output):
        logs[f"{prefix}{name}_loss"] = float(losses[index] / count)
        logs[f"{prefix}{name}_accuracy"] = float(accuracies[index])
    logs[f"{prefix}accuracy"] = float(np.mean(accuracies))
    return logs


def evaluate_feed(
    model: ModelGraph, feed: Feed, batch_size: int = 256, prefix: str = "val_"
) -> dict[str, float]:
    """Inference-mode loss and accuracy per output over a whole feed.

    Multi-output models also report the mean accuracy as ``accuracy``.
    """
    n_out = len(model.outputs)
    losses = np.zeros(n_out)
    correct = np.zeros(n_out)
    count = 0
    for batch in feed.batches(batch_size, shuffle=False):
        outputs = model.forward(*batch.inputs, training=False)
        for index, (probs, labels) in enumerate(zip(outputs, batch.targets, strict=True)):
            loss, _ = sparse_ce_batch(probs, labels)
            losses[index] += loss * batch.size
            correct[index] += int(np.sum(predict_classes(probs) == labels))
        count += batch.size
    if count == 0:
        raise ValueError("cannot evaluate on an empty feed")
    return _summarize(model, losses, correct, count, prefix)


def fit(
    model: ModelGraph,
    train_feed: Feed,
    val_feed: Feed,
    optimizer: Optimizer,
    plan: StagePlan,
    *,
    callbacks: Sequence[Callback] = (),
    batch_size: int = 32,
    seed: int = 0,
    progress: bool = False,
    label: str | None = None,
) -> FitResult:
    """Train ``model`` for up to ``plan.epochs`` epochs.

    Each batch runs forward, summed per-output cross-entropy, backward and an
    optimizer step. After every epoch the validation feed is evaluated and the
    callbacks fire; any callback may stop training.

    Raises:
        NonFiniteLossError: If a batch loss is NaN or Inf.
    """
    label = label or plan.stage
    history = MetricsRecord()
    for callback in callbacks:
        callback.set_optimizer(optimizer)
        callback.on_train_begin(model)
    stopped: int | None = None
    n_out = len(model.outputs)
    for epoch in range(1, plan.epochs + 1):
        losses = np.zeros(n_out)
        correct = np.zeros(n_out)
        count = 0
        batches = train_feed.batches(batch_size, shuffle=True, seed=seed, epoch=epoch)
        total = math.ceil(len(train_feed) / batch_size)
        for index, batch in enumerate(
            tqdm(batches, total=total, desc=f"{label} epoch {epoch}", disable=not progress, leave=False)
        ):
            rng = RngStream(seed, f"dropout/{label}/epoch{epoch}/batch{index}")
            outputs = model.forward(*batch.inputs, training=True, rng=rng)
            grads = []
            batch_loss = 0.0
            for out_index, (probs, labels) in enumerate(zip(outputs, batch.targets, strict=True)):
                loss, grad = sparse_ce_batch(probs, labels)
                batch_loss += loss
                grads.append(grad)
                losses[out_index] += loss * batch.size
                correct[out_index] += int(np.sum(predict_classes(probs) == labels))
            if not math.isfinite(batch_loss):
                raise NonFiniteLossError(epoch, index, model.first_nonfinite())
            optimizer.step(model.backward(grads, from_logits=True))
            count += batch.size
        logs = _summarize(model, losses, correct, max(count, 1))
        logs.update(evaluate_feed(model, val_feed, batch_size=max(batch_size, 256)))
        history.append(epoch, logs)
        logger.info(
            "%s epoch %d/%d: loss=%.4f accuracy=%.4f val_loss=%.4f val_accuracy=%.4f",
            label,
            epoch,
            plan.epochs,
            logs["loss"],
            logs["accuracy"],
            logs["val_loss"],
            logs["val_accuracy"],
        )
        decisions = [callback.on_epoch_end(epoch, logs, model) for callback in callbacks]
        if any(decisions):
            stopped = epoch
            break
    for callback in callbacks:
        callback.on_train_end(model)

    result = FitResult(model, history, stopped_epoch=stopped, optimizer=optimizer)
    for callback in callbacks:
        if isinstance(callback, EarlyStopping):
            result.best_epoch = callback.best_epoch
        elif isinstance(callback, ModelCheckpoint) and callback.best_epoch is not None:
            result.checkpoints[callback.path.name] = callback.path
    return result


@dataclass
class Evaluation:
    """Test-set evaluation of a single-output model."""

    loss: float
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    confusion: np.ndarray
    report: ClassificationReport


def evaluate(model: ModelGraph, dataset: Dataset, batch_size: int = 256) -> Evaluation:
    """Predict every sample of ``dataset`` and build the confusion matrix and report."""
    if len(model.outputs) != 1 or len(model.inputs) != 1:
        raise ValueError(f"evaluate expects a single-input single-output model, got {model!r}")
    predictions = []
    total_loss = 0.0
    for batch in SingleFeed(dataset).batches(batch_size, shuffle=False):
        probs = model.predict(*batch.inputs)
        loss, _ = sparse_ce_batch(probs, batch.targets[0])
        total_loss += loss * batch.size
        predictions.append(predict_classes(probs))
    if not predictions:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.concatenate(predictions)
    confusion = confusion_matrix(dataset.labels, preds)
    report = classification_report(confusion)
    return Evaluation(
        loss=total_loss / len(dataset),
        accuracy=report.accuracy,
        predictions=preds,
        labels=dataset.labels,
        confusion=confusion,
        report=report,
    )
