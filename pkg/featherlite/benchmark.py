"""Latency, throughput-vs-batch-size, and size measurements for trained models.

Timings cover the model forward pass only. Inputs are prepared before the
clock starts and the model is never rebuilt inside a timed region.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from featherlite.checkpoint import checkpoint_size_bytes
from featherlite.netgraph import ModelGraph, ParamCount, count_params
from featherlite.tensor import ShapeError

logger = logging.getLogger(__name__)

TIMED_SPAN = "model forward pass only"
MAX_BATCH_EXP = 14
TERMINATION_MAX_N = "max_n_reached"
TERMINATION_ALLOCATION = "allocation_failure"

# Guards samples/second against a zero-length interval from coarse clocks.
_MIN_ELAPSED = 1e-12

Clock = Callable[[], float]


class Predictor(Protocol):
    def predict(self, *xs: np.ndarray) -> np.ndarray: ...


def _population_stats(values: list[float]) -> tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std(ddof=0))


@dataclass
class LatencyReport:
    """Single-sample inference latency in milliseconds."""

    dataset: str
    repetitions: int
    warmup: int
    mean_ms: float
    std_ms: float
    span: str = TIMED_SPAN

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ThroughputPoint:
    batch_exp: int
    batch_size: int
    mean_samples_per_sec: float
    std_samples_per_sec: float
    repetitions: int


@dataclass
class ThroughputReport:
    """Samples per second for batch sizes ``2^0, 2^1, ...``.

    ``termination`` is ``max_n_reached`` when the sweep completed, or
    ``allocation_failure`` when a batch could not be allocated;
    ``failed_batch_size`` then names that batch.
    """

    dataset: str
    points: list[ThroughputPoint] = field(default_factory=list)
    termination: str = TERMINATION_MAX_N
    failed_batch_size: int | None = None
    threads: int = 1
    span: str = TIMED_SPAN

    @property
    def batch_sizes(self) -> list[int]:
        return [p.batch_size for p in self.points]

    def series(self) -> dict[str, list[float]]:
        """Column-wise view used for CSV emission."""
        return {
            "batch_exp": [float(p.batch_exp) for p in self.points],
            "batch_size": [float(p.batch_size) for p in self.points],
            "mean_samples_per_sec": [p.mean_samples_per_sec for p in self.points],
            "std_samples_per_sec": [p.std_samples_per_sec for p in self.points],
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "threads": self.threads,
            "span": self.span,
            "termination": self.termination,
            "failed_batch_size": self.failed_batch_size,
            "points": [asdict(p) for p in self.points],
        }


@dataclass
class SizeReport:
    """Parameter count, parameter bytes, and on-disk checkpoint size."""

    params: ParamCount
    disk_bytes: int | None = None

    def summary_line(self) -> str:
        return str(self.params)

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.count,
            "param_bytes": self.params.bytes,
            "param_kilobytes": round(self.params.kilobytes, 2),
            "summary": self.summary_line(),
            "disk_bytes": self.disk_bytes,
            "disk_megabytes": None if self.disk_bytes is None else round(self.disk_bytes / 1024.0**2, 4),
        }


def _as_batch(model: Predictor, sample: np.ndarray) -> np.ndarray:
    """Add the batch axis to one sample and check it against the model input."""
    array = np.asarray(sample)
    if not isinstance(model, ModelGraph):
        return array if array.ndim > 0 and array.shape[0] == 1 else array[np.newaxis]
    expected = tuple(next(iter(model.inputs.values())))
    if array.shape == expected:
        array = array[np.newaxis]
    if array.shape != (1, *expected):
        raise ShapeError(f"sample shaped {np.asarray(sample).shape} does not fit model input {expected}")
    return array


def measure_latency(
    model: Predictor,
    sample: np.ndarray,
    reps: int = 100,
    warmup: int = 10,
    *,
    dataset: str = "",
    clock: Clock = time.perf_counter,
) -> LatencyReport:
    """Time ``reps`` single-sample forward passes after ``warmup`` untimed ones.

    Mean and population standard deviation are reported in milliseconds.

    Raises:
        ValueError: If ``reps < 2`` or ``warmup < 0``.
        ShapeError: If ``sample`` does not fit the model input.
    """
    if reps < 2 or warmup < 0:
        raise ValueError(f"reps must be >= 2 and warmup >= 0, got {reps}, {warmup}")
    batch = _as_batch(model, sample)
    for _ in range(warmup):
        model.predict(batch)
    timings: list[float] = []
    for _ in range(reps):
        start = clock()
        model.predict(batch)
        timings.append((clock() - start) * 1000.0)
    mean, std = _population_stats(timings)
    logger.info("Latency over %d reps: %.3f ms (std %.3f ms)", reps, mean, std)
    return LatencyReport(dataset, reps, warmup, mean, std)


def _tile(data: np.ndarray, batch_size: int) -> np.ndarray:
    index = np.arange(batch_size) % data.shape[0]
    return np.ascontiguousarray(data[index])


def _replicas(model: Predictor, threads: int) -> list[Predictor]:
    """One model per worker thread; layers keep per-call caches."""
    if isinstance(model, ModelGraph):
        return [model.copy() for _ in range(threads)]
    return [model] * threads


def _threaded_predict(replicas: list[Predictor], batch: np.ndarray, pool: ThreadPoolExecutor) -> None:
    chunks = np.array_split(batch, min(len(replicas), batch.shape[0]))
    list(pool.map(lambda pair: pair[0].predict(pair[1]), zip(replicas, chunks, strict=False)))


def measure_throughput(
    model: Predictor,
    data: np.ndarray,
    max_n: int = MAX_BATCH_EXP,
    reps: int = 100,
    *,
    dataset: str = "",
    warmup: int = 1,
    threads: int = 1,
    fail_at_exp: int | None = None,
    clock: Clock = time.perf_counter,
) -> ThroughputReport:
    """Sweep batch sizes ``2^0 .. 2^max_n`` and record samples per second.

    Each batch size runs ``warmup`` untimed passes and ``reps`` timed ones.
    A ``MemoryError`` while building or running a batch ends the sweep and is
    recorded as ``allocation_failure``; it never propagates.

    Args:
        model: Anything with ``predict(batch)``.
        data: Sample pool ``[N, ...]``; batches cycle through it.
        max_n: Largest batch exponent.
        reps: Timed repetitions per batch size.
        dataset: Name recorded in the report.
        warmup: Untimed passes per batch size.
        threads: When above 1, each batch is split across a thread pool and
            the result is reported as a separate multi-thread sweep.
        fail_at_exp: Test hook that simulates allocation failure at ``2^n``.
        clock: Monotonic clock in seconds.
    """
    if max_n < 0 or reps < 2 or threads < 1:
        raise ValueError(f"need max_n >= 0, reps >= 2, threads >= 1; got {max_n}, {reps}, {threads}")
    data = np.asarray(data)
    if data.shape[0] == 0:
        raise ValueError("throughput needs at least one sample")
    report = ThroughputReport(dataset, threads=threads)
    pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="Bench") if threads > 1 else None
    replicas = _replicas(model, threads) if pool is not None else []

    def _run(batch: np.ndarray) -> None:
        if pool is None:
            model.predict(batch)
        else:
            _threaded_predict(replicas, batch, pool)

    try:
        for exp in range(max_n + 1):
            batch_size = 2**exp
            try:
                if fail_at_exp is not None and exp >= fail_at_exp:
                    raise MemoryError(f"simulated allocation failure at batch {batch_size}")
                batch = _tile(data, batch_size)
                for _ in range(warmup):
                    _run(batch)
                rates: list[float] = []
                for _ in range(reps):
                    start = clock()
                    _run(batch)
                    rates.append(batch_size / max(clock() - start, _MIN_ELAPSED))
            except MemoryError as exc:
                logger.warning("Throughput sweep stopped at batch %d: %s", batch_size, exc)
                report.termination = TERMINATION_ALLOCATION
                report.failed_batch_size = batch_size
                break
            mean, std = _population_stats(rates)
            report.points.append(ThroughputPoint(exp, batch_size, mean, std, reps))
            logger.debug("Batch %d: %.1f samples/s (std %.1f)", batch_size, mean, std)
    finally:
        if pool is not None:
            pool.shutdown()
    logger.info(
        "Throughput sweep over %d batch sizes ended with %s", len(report.points), report.termination
    )
    return report


def size_report(model: ModelGraph, checkpoint: Path | None = None) -> SizeReport:
    """Parameter count and, when a checkpoint is given, its size on disk."""
    disk = checkpoint_size_bytes(checkpoint) if checkpoint is not None else None
    return SizeReport(count_params(model), disk)


def expected_batch1_rate(latency: LatencyReport) -> float:
    """Samples per second implied by a latency mean (``1000 / mean_ms``)."""
    if latency.mean_ms <= 0:
        return math.inf
    return 1000.0 / latency.mean_ms
