"""Main training pipeline: dual training, surgery, progressive unfreezing, k-fold, evaluation."""

from __future__ import annotations

import logging
import platform
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import matplotlib
import numpy as np
import scipy

from featherlite import __version__
from featherlite.benchmark import size_report
from featherlite.checkpoint import checkpoint_exists, load_checkpoint, read_checkpoint, save_checkpoint
from featherlite.dataio import (
    Dataset,
    PairedFeed,
    SingleFeed,
    kfold_split,
    load_dataset,
    split_train_val,
)
from featherlite.netgraph import (
    BRANCH_PREFIXES,
    FreezeMask,
    ModelGraph,
    build_dual_model,
    build_final_model,
    count_params,
    extract_branch,
    set_freeze,
)
from featherlite.optim import Optimizer, build_optimizer
from featherlite.pipeline_settings import PipelineSettings
from featherlite.report import (
    CHECKPOINT_DIR,
    RUN_MANIFEST,
    RunBundle,
    emit_reports,
    load_run_bundle,
    write_results,
)
from featherlite.tensor import RngStream
from featherlite.trainer import (
    STAGE_S1,
    STAGE_S2_FULL,
    STAGE_S2_HEAD,
    STAGE_S3,
    EarlyStopping,
    FitResult,
    ModelCheckpoint,
    StagePlan,
    default_stage_plans,
    evaluate,
    fit,
)
from featherlite.utils import Timer, ensure_dir, format_duration, write_json

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("s1", "s2", "s3", "all")
FINAL_CHECKPOINT = "final"
S2_FULL_CHECKPOINT = "s2_full"


class PipelineStageError(RuntimeError):
    """A pipeline stage failed. Artifacts written before the failure are kept.

    Attributes:
        stage: Stage id that failed.
        run_dir: Run directory holding the partial artifacts.
    """

    def __init__(self, stage: str, run_dir: Path, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.run_dir = run_dir


@dataclass
class PipelineData:
    """Datasets a run trains and evaluates on."""

    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.train.sample_shape

    @property
    def pool(self) -> Dataset:
        """Training pool for k-fold: train and validation recombined."""
        return self.train.concat(self.val)


def prepare_data(settings: PipelineSettings) -> PipelineData:
    """Load the dataset, hold out the validation tail, and apply subset limits."""
    splits = load_dataset(settings.dataset, settings.data_dir)
    train, val = split_train_val(splits.train, settings.val_size)
    data = PipelineData(
        train.head(settings.train_limit),
        val.head(settings.val_limit),
        splits.test.head(settings.test_limit),
    )
    logger.info(
        "Using %d train / %d val / %d test samples", len(data.train), len(data.val), len(data.test)
    )
    return data


def run_dir_for(settings: PipelineSettings) -> Path:
    """``<out_dir>/<dataset>-seed<seed>``; stable so later stages can resume."""
    return Path(settings.out_dir) / f"{settings.dataset}-seed{settings.seed}"


def library_versions() -> dict[str, str]:
    return {
        "featherlite": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "python": platform.python_version(),
    }


class Pipeline:
    """Runs the staged training flow for one dataset and seed.

    Stages:
        s1: dual model on original + augmented inputs (Nadam), keeping the
            best checkpoint of each output.
        s2: build the final model from those checkpoints, train the head with
            everything else frozen (Nadam), then everything (SGD).
        s3: k-fold fine-tuning of one model across folds (SGD), then test
            evaluation of the final model and of every fold's best checkpoint.
    """

    def __init__(
        self,
        settings: PipelineSettings,
        *,
        data_loader: Callable[[PipelineSettings], PipelineData] = prepare_data,
    ):
        settings.ensure_valid()
        self.settings = settings
        self.plans = default_stage_plans(settings)
        self.run_dir = ensure_dir(run_dir_for(settings))
        self.checkpoint_dir = ensure_dir(self.run_dir / CHECKPOINT_DIR)
        self._data_loader = data_loader
        self._data: PipelineData | None = None
        self.bundle = RunBundle(self.run_dir, settings.dataset)

    # Helpers -------------------------------------------------------------------

    @property
    def data(self) -> PipelineData:
        if self._data is None:
            self._data = self._data_loader(self.settings)
            self.bundle.class_names = self._data.train.class_names
        return self._data

    def _checkpoint(self, name: str) -> Path:
        return self.checkpoint_dir / name

    def _manifest(self) -> dict[str, Any]:
        return {
            "dataset": self.settings.dataset,
            "seed": self.settings.seed,
            "config_hash": self.settings.config_hash(),
            "settings": self.settings.to_dict(),
            "versions": library_versions(),
            "stages": list(self.bundle.histories),
        }

    def _write_manifest(self) -> None:
        write_json(self.run_dir / RUN_MANIFEST, self._manifest())

    def _load_previous(self) -> None:
        """Carry histories and best epochs of earlier stages into this run."""
        manifest_path = self.run_dir / RUN_MANIFEST
        if not manifest_path.exists():
            return
        previous = load_run_bundle(self.run_dir)
        if previous.manifest.get("config_hash") != self.settings.config_hash():
            logger.warning(
                "Run directory %s was created with different settings; resuming anyway", self.run_dir
            )
        self.bundle.histories.update(previous.histories)
        self.bundle.best_epochs.update(previous.best_epochs)

    def _record(self, stage: str, result: FitResult) -> None:
        self.bundle.histories[stage] = result.history
        self.bundle.best_epochs[stage] = result.best_epoch
        write_results(self.bundle)
        self._write_manifest()

    def _fit(
        self,
        model: ModelGraph,
        plan: StagePlan,
        train_feed: Any,
        val_feed: Any,
        *,
        label: str,
        checkpoints: list[ModelCheckpoint],
        optimizer: Optimizer | None = None,
    ) -> FitResult:
        if plan.freeze == "head_only":
            set_freeze(model, FreezeMask.head_only(model))
        elif plan.freeze == "all_trainable":
            set_freeze(model, FreezeMask.all_trainable(model))
        logger.info(
            "Stage %s: %s, up to %d epochs, %s trainable parameters",
            label,
            plan.optimizer,
            plan.epochs,
            count_params(model, trainable_only=True),
        )
        if optimizer is None:
            optimizer = build_optimizer(model, plan.optimizer, **plan.optimizer_hyper)
        with Timer(f"Stage {label}") as timer:
            result = fit(
                model,
                train_feed,
                val_feed,
                optimizer,
                plan,
                callbacks=[EarlyStopping(plan.early_stop), *checkpoints],
                batch_size=self.settings.batch_size,
                seed=self.settings.seed,
                progress=self.settings.progress,
                label=label,
            )
        logger.info("Stage %s finished in %s", label, format_duration(timer.elapsed or 0.0))
        return result

    # Stages -------------------------------------------------------------------

    def stage_s1(self) -> list[Path]:
        """Train the dual model; returns the two per-output best checkpoints."""
        plan = self.plans[STAGE_S1]
        data = self.data
        model = build_dual_model(data.input_shape, seed=self.settings.seed)
        train_feed = PairedFeed(
            data.train,
            self.settings.augment,
            RngStream(self.settings.seed, "augment"),
            max_workers=self.settings.max_workers,
        )
        val_feed = PairedFeed(data.val)
        checkpoints = [
            ModelCheckpoint(self._checkpoint(name), monitor, branch=prefix)
            for (name, monitor), prefix in zip(plan.checkpoints.items(), BRANCH_PREFIXES, strict=True)
        ]
        result = self._fit(model, plan, train_feed, val_feed, label=STAGE_S1, checkpoints=checkpoints)
        paths = []
        for callback, prefix in zip(checkpoints, BRANCH_PREFIXES, strict=True):
            if callback.best_epoch is None:
                # No epoch ran; keep the untrained branch so later stages can start.
                save_checkpoint(extract_branch(model, prefix), callback.path, metadata={"epoch": 0})
            paths.append(callback.path)
        self._record(STAGE_S1, result)
        return paths

    def stage_s2(self) -> ModelGraph:
        """Build the final model from the S1 checkpoints and train head, then all layers."""
        names = list(self.plans[STAGE_S1].checkpoints)
        branches = [load_checkpoint(self._checkpoint(name)) for name in names]
        data = self.data
        model = build_final_model(branches, data.input_shape, seed=self.settings.seed)
        train_feed, val_feed = SingleFeed(data.train), SingleFeed(data.val)

        for stage in (STAGE_S2_HEAD, STAGE_S2_FULL):
            plan = self.plans[stage]
            checkpoints = [
                ModelCheckpoint(self._checkpoint(name), monitor) for name, monitor in plan.checkpoints.items()
            ]
            result = self._fit(model, plan, train_feed, val_feed, label=stage, checkpoints=checkpoints)
            self._record(stage, result)
        optimizer_state = result.optimizer.state_dict() if result.optimizer is not None else None
        save_checkpoint(
            model,
            self._checkpoint(S2_FULL_CHECKPOINT),
            metadata={"stage": STAGE_S2_FULL},
            optimizer_state=optimizer_state,
        )
        return model

    def stage_s3(self, model: ModelGraph | None = None) -> ModelGraph:
        """Fine-tune one model sequentially over the folds of the recombined pool.

        One SGD optimizer serves every fold. It starts from the optimizer
        state stored with the ``s2_full`` checkpoint, so a resumed ``s3`` and
        a single ``all`` run train identically.
        """
        saved = read_checkpoint(self._checkpoint(S2_FULL_CHECKPOINT))
        if model is None:
            model = saved.graph
        plan = self.plans[STAGE_S3]
        set_freeze(model, FreezeMask.all_trainable(model))
        optimizer = build_optimizer(model, plan.optimizer, **plan.optimizer_hyper)
        if saved.optimizer_state is not None and saved.optimizer_state.get("kind") == optimizer.kind:
            optimizer.load_state_dict(saved.optimizer_state)
            logger.info("Continuing %s optimizer state from %s", optimizer.kind, S2_FULL_CHECKPOINT)
        pool = self.data.pool
        folds = kfold_split(len(pool), self.settings.folds, self.settings.seed)
        fold_paths = []
        for fold in folds:
            label = f"s3_fold{fold.index}"
            path = self._checkpoint(f"fold{fold.index}_best")
            callback = ModelCheckpoint(path, "val_accuracy")
            result = self._fit(
                model,
                plan,
                SingleFeed(pool.subset(fold.train_indices)),
                SingleFeed(pool.subset(fold.val_indices)),
                label=label,
                checkpoints=[callback],
                optimizer=optimizer,
            )
            if callback.best_epoch is None:
                save_checkpoint(model, path, metadata={"epoch": 0})
            fold_paths.append(path)
            self._record(label, result)
        save_checkpoint(
            model,
            self._checkpoint(FINAL_CHECKPOINT),
            metadata={"stage": STAGE_S3},
            optimizer_state=optimizer.state_dict(),
        )
        self.evaluate_folds(fold_paths)
        return model

    # Evaluation -------------------------------------------------------------------

    def evaluate_final(self, model: ModelGraph, checkpoint: Path) -> None:
        test = self.data.test
        evaluation = evaluate(model, test)
        self.bundle.test_loss = evaluation.loss
        self.bundle.test_accuracy = evaluation.accuracy
        self.bundle.confusion = evaluation.confusion
        self.bundle.size = size_report(model, checkpoint)
        logger.info(
            "Test accuracy %.4f on %d samples; model %s",
            evaluation.accuracy,
            len(test),
            self.bundle.size.summary_line(),
        )
        write_results(self.bundle)

    def evaluate_folds(self, fold_paths: list[Path]) -> list[float]:
        accuracies = []
        for path in fold_paths:
            accuracies.append(evaluate(load_checkpoint(path), self.data.test).accuracy)
        self.bundle.fold_test_accuracies = accuracies
        logger.info("Per-fold test accuracies: %s", ", ".join(f"{a:.4f}" for a in accuracies))
        return accuracies

    # Orchestration -------------------------------------------------------------------

    def _run_stage(self, stage: str, action: Callable[[], Any]) -> Any:
        try:
            return action()
        except (KeyboardInterrupt, PipelineStageError):
            raise
        except Exception as exc:
            logger.error("Stage %s failed: %s", stage, exc)
            raise PipelineStageError(stage, self.run_dir, exc) from exc

    def run(self, stage: str = "all") -> RunBundle:
        """Run ``stage`` (``s1``, ``s2``, ``s3``) or the whole flow (``all``).

        ``s2`` and ``s3`` resume from the checkpoints an earlier invocation
        left in the run directory.

        Raises:
            ValueError: Unknown stage.
            PipelineStageError: A stage failed.
        """
        if stage not in PIPELINE_STAGES:
            raise ValueError(f"stage must be one of {PIPELINE_STAGES}, got {stage!r}")
        self._load_previous()
        self._write_manifest()
        logger.info("Run directory: %s (config %s)", self.run_dir, self.settings.config_hash()[:12])
        model: ModelGraph | None = None
        if stage in ("s1", "all"):
            self._run_stage("s1", self.stage_s1)
        if stage in ("s2", "all"):
            self._require("s2", [self._checkpoint(n) for n in self.plans[STAGE_S1].checkpoints])
            model = self._run_stage("s2", self.stage_s2)
        if stage in ("s3", "all"):
            if model is None:
                self._require("s3", [self._checkpoint(S2_FULL_CHECKPOINT)])
            model = self._run_stage("s3", lambda: self.stage_s3(model))
        if model is not None:
            checkpoint = self._checkpoint(FINAL_CHECKPOINT if stage in ("s3", "all") else S2_FULL_CHECKPOINT)
            self._run_stage("evaluate", lambda: self.evaluate_final(model, checkpoint))
        self._write_manifest()
        emit_reports(self.bundle)
        return self.bundle

    def _require(self, stage: str, paths: list[Path]) -> None:
        missing = [p.name for p in paths if not checkpoint_exists(p)]
        if missing:
            error = FileNotFoundError(
                f"missing checkpoints {missing} in {self.checkpoint_dir}; run the earlier stage first"
            )
            raise PipelineStageError(stage, self.run_dir, error) from error


def run_pipeline(
    settings: PipelineSettings,
    stage: str = "all",
    *,
    data_loader: Callable[[PipelineSettings], PipelineData] = prepare_data,
) -> RunBundle:
    """Run the training pipeline and emit its reports. See :class:`Pipeline`."""
    return Pipeline(settings, data_loader=data_loader).run(stage)

