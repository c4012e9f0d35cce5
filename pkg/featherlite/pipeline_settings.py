"""Shared settings for training pipeline runs."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar

from featherlite.augment import AugmentConfig
from featherlite.dataio import DATASETS
from featherlite.tensor import ConfigurationError
from featherlite.utils import hash_json

DATA_DIR_ENV = "FEATHERLITE_DATA_DIR"
STAGES = ("s1", "s2", "s3")


@dataclass(frozen=True, slots=True)
class ValidationIssue:
    """Represents a single validation issue for pipeline settings."""

    field: str
    message: str


def default_data_dir() -> Path:
    """``FEATHERLITE_DATA_DIR`` when set, else ``./data``."""
    return Path(os.environ.get(DATA_DIR_ENV) or "data")


class PipelineSettings:
    """Container for pipeline settings."""

    _SERIALIZED_FIELDS: ClassVar[tuple[str, ...]] = (
        "dataset",
        "seed",
        "batch_size",
        "data_dir",
        "out_dir",
        "val_size",
        "train_limit",
        "val_limit",
        "test_limit",
        "epoch_scale",
        "s1_epochs",
        "s2_head_epochs",
        "s2_full_epochs",
        "s3_epochs",
        "folds",
        "patience",
        "min_delta",
        "dual_monitor",
        "nadam_lr",
        "sgd_lr",
        "momentum",
        "weight_decay",
        "nesterov",
        "decoupled_weight_decay",
        "augment",
        "max_workers",
        "progress",
        "verbose",
    )

    # Fields that do not change what gets trained; left out of the config hash.
    _RUNTIME_FIELDS: ClassVar[frozenset[str]] = frozenset(
        {"data_dir", "out_dir", "max_workers", "progress", "verbose"}
    )

    def __init__(self, **kwargs: Any) -> None:
        """Initialize settings from keyword arguments."""
        unknown = set(kwargs) - set(self._SERIALIZED_FIELDS)
        if unknown:
            raise ConfigurationError(f"unknown setting(s): {', '.join(sorted(unknown))}")

        self.dataset: str = kwargs.get("dataset", "mnist")
        self.seed: int = kwargs.get("seed", 42)
        self.batch_size: int = kwargs.get("batch_size", 32)

        data_dir = kwargs.get("data_dir")
        self.data_dir: Path = Path(data_dir) if data_dir else default_data_dir()
        self.out_dir: Path = Path(kwargs.get("out_dir") or "runs")

        # Splits and subsets (None = full set)
        self.val_size: int = kwargs.get("val_size", 10_000)
        self.train_limit: int | None = kwargs.get("train_limit")
        self.val_limit: int | None = kwargs.get("val_limit")
        self.test_limit: int | None = kwargs.get("test_limit")

        # Stage epoch caps
        self.epoch_scale: float = kwargs.get("epoch_scale", 1.0)
        self.s1_epochs: int = kwargs.get("s1_epochs", 20)
        self.s2_head_epochs: int = kwargs.get("s2_head_epochs", 20)
        self.s2_full_epochs: int = kwargs.get("s2_full_epochs", 50)
        self.s3_epochs: int = kwargs.get("s3_epochs", 10)
        self.folds: int = kwargs.get("folds", 6)

        # Callbacks
        self.patience: int = kwargs.get("patience", 5)
        self.min_delta: float = kwargs.get("min_delta", 0.001)
        self.dual_monitor: str = kwargs.get("dual_monitor", "mean")

        # Optimizers
        self.nadam_lr: float = kwargs.get("nadam_lr", 0.001)
        self.sgd_lr: float = kwargs.get("sgd_lr", 0.001)
        self.momentum: float = kwargs.get("momentum", 0.9)
        self.weight_decay: float = kwargs.get("weight_decay", 1e-4)
        self.nesterov: bool = bool(kwargs.get("nesterov", True))
        self.decoupled_weight_decay: bool = bool(kwargs.get("decoupled_weight_decay", True))

        augment = kwargs.get("augment")
        if isinstance(augment, AugmentConfig):
            self.augment: AugmentConfig = augment
        else:
            self.augment = AugmentConfig.from_dict(augment)

        # Workflow
        self.max_workers: int = kwargs.get("max_workers", 1)
        self.progress: bool = bool(kwargs.get("progress", True))
        self.verbose: bool = bool(kwargs.get("verbose", False))

    def scaled_epochs(self, cap: int) -> int:
        """Apply ``epoch_scale`` to a stage cap (rounded, at least 1; 0 stays 0)."""
        if cap <= 0:
            return 0
        return max(1, int(math.floor(cap * float(self.epoch_scale) + 0.5)))

    def validate(self) -> list[ValidationIssue]:
        """Return a list of validation issues for the current settings."""

        issues: list[ValidationIssue] = []

        def _label(field: str) -> str:
            return field.replace("_", " ").capitalize()

        def _int_at_least(field: str, minimum: int, *, allow_none: bool = False) -> None:
            value = getattr(self, field)
            if value is None and allow_none:
                return
            if isinstance(value, bool) or not isinstance(value, int):
                issues.append(ValidationIssue(field, f"{_label(field)} must be an integer."))
            elif value < minimum:
                issues.append(ValidationIssue(field, f"{_label(field)} must be at least {minimum}."))

        def _positive_float(field: str, *, allow_zero: bool = False) -> None:
            value = getattr(self, field)
            try:
                number = float(value)
            except (TypeError, ValueError):
                issues.append(ValidationIssue(field, f"{_label(field)} must be numeric."))
                return
            if number < 0 or (number == 0 and not allow_zero):
                bound = "non-negative" if allow_zero else "greater than zero"
                issues.append(ValidationIssue(field, f"{_label(field)} must be {bound}."))

        if self.dataset not in DATASETS:
            issues.append(
                ValidationIssue("dataset", f"Dataset must be one of: {', '.join(sorted(DATASETS))}.")
            )
        _int_at_least("seed", 0)
        _int_at_least("batch_size", 1)
        _int_at_least("val_size", 1)
        for field in ("train_limit", "val_limit", "test_limit"):
            _int_at_least(field, 1, allow_none=True)
        for field in ("s1_epochs", "s2_head_epochs", "s2_full_epochs", "s3_epochs"):
            _int_at_least(field, 0)
        _int_at_least("folds", 2)
        _int_at_least("patience", 1)
        _int_at_least("max_workers", 1)
        _positive_float("epoch_scale")
        _positive_float("min_delta", allow_zero=True)
        _positive_float("nadam_lr")
        _positive_float("sgd_lr")
        _positive_float("weight_decay", allow_zero=True)
        try:
            if not 0.0 <= float(self.momentum) < 1.0:
                issues.append(ValidationIssue("momentum", "Momentum must be in [0, 1)."))
        except (TypeError, ValueError):
            issues.append(ValidationIssue("momentum", "Momentum must be numeric."))
        if self.dual_monitor not in {"mean", "all"}:
            issues.append(ValidationIssue("dual_monitor", "Dual monitor must be 'mean' or 'all'."))
        return issues

    def ensure_valid(self) -> None:
        """Raise ValueError listing every validation issue, if any."""
        issues = self.validate()
        if issues:
            messages = "; ".join(issue.message for issue in issues)
            raise ValueError(f"Invalid pipeline settings: {messages}")

    def to_dict(self) -> dict[str, Any]:
        """Serialize pipeline settings to a JSON-ready dictionary."""
        result: dict[str, Any] = {}
        for key in self._SERIALIZED_FIELDS:
            value = getattr(self, key, None)
            if isinstance(value, Path):
                value = str(value)
            elif isinstance(value, AugmentConfig):
                value = value.to_dict()
            result[key] = value
        return result

    def config_hash(self) -> str:
        """SHA-256 of the settings that affect training results."""
        data = {k: v for k, v in self.to_dict().items() if k not in self._RUNTIME_FIELDS}
        return hash_json(data)

    def with_overrides(self, **overrides: Any) -> PipelineSettings:
        """Copy with ``overrides`` applied; None values are ignored."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "augment" and isinstance(value, dict):
                data["augment"] = {**data["augment"], **value}
            else:
                data[key] = value
        return PipelineSettings.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> PipelineSettings:
        """Create pipeline settings from a previously serialized dictionary."""
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise TypeError("PipelineSettings.from_dict expects a dictionary.")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path: Path) -> PipelineSettings:
        """Load settings from a JSON config file."""
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
