"""Tests for latency, throughput, and size measurements."""

from pathlib import Path

import numpy as np
import pytest

from featherlite.benchmark import (
    TERMINATION_ALLOCATION,
    TERMINATION_MAX_N,
    expected_batch1_rate,
    measure_latency,
    measure_throughput,
    size_report,
)
from featherlite.checkpoint import checkpoint_size_bytes, save_checkpoint
from featherlite.netgraph import build_branch, build_dual_model, build_final_model
from featherlite.tensor import ShapeError


class FakeClock:
    def __init__(self) -> None:
        self.now = 0.0

    def __call__(self) -> float:
        return self.now


class StubModel:
    """Advances a fake clock by a fixed overhead plus a per-sample cost."""

    def __init__(self, clock: FakeClock, overhead: float = 1e-3, per_sample: float = 1e-4):
        self.clock = clock
        self.overhead = overhead
        self.per_sample = per_sample
        self.calls: list[int] = []

    def predict(self, batch: np.ndarray) -> np.ndarray:
        self.calls.append(batch.shape[0])
        self.clock.now += self.overhead + self.per_sample * batch.shape[0]
        return np.zeros((batch.shape[0], 10), dtype=np.float32)


@pytest.fixture
def stub() -> StubModel:
    return StubModel(FakeClock())


def test_latency_uses_forward_time_only(stub: StubModel) -> None:
    report = measure_latency(
        stub, np.zeros((28, 28, 1)), reps=20, warmup=3, dataset="mnist", clock=stub.clock
    )
    assert report.mean_ms == pytest.approx(1.1)
    assert report.std_ms == pytest.approx(0.0, abs=1e-9)
    assert report.repetitions == 20 and report.warmup == 3
    assert len(stub.calls) == 23
    assert set(stub.calls) == {1}


def test_latency_needs_two_repetitions(stub: StubModel) -> None:
    with pytest.raises(ValueError):
        measure_latency(stub, np.zeros((1, 4)), reps=1, clock=stub.clock)


def test_latency_rejects_sample_of_wrong_shape() -> None:
    model = build_branch((10, 10, 1))
    with pytest.raises(ShapeError):
        measure_latency(model, np.zeros((12, 12, 1), dtype=np.float32), reps=2, warmup=0)


def test_latency_accepts_sample_with_batch_axis() -> None:
    model = build_branch((10, 10, 1))
    report = measure_latency(model, np.zeros((1, 10, 10, 1), dtype=np.float32), reps=3, warmup=1)
    assert report.mean_ms >= 0.0


def test_throughput_sweep_completes(stub: StubModel) -> None:
    data = np.zeros((5, 4), dtype=np.float32)
    report = measure_throughput(stub, data, max_n=6, reps=3, clock=stub.clock)
    assert report.termination == TERMINATION_MAX_N
    assert report.failed_batch_size is None
    assert report.batch_sizes == [1, 2, 4, 8, 16, 32, 64]
    rates = [p.mean_samples_per_sec for p in report.points]
    assert rates == sorted(rates)
    assert rates[-1] == pytest.approx(64 / (1e-3 + 64e-4))


def test_throughput_simulated_allocation_failure(stub: StubModel) -> None:
    report = measure_throughput(stub, np.zeros((3, 4)), max_n=14, reps=2, fail_at_exp=6, clock=stub.clock)
    assert report.termination == TERMINATION_ALLOCATION
    assert report.failed_batch_size == 64
    assert report.batch_sizes[-1] == 32
    assert [p.batch_exp for p in report.points] == list(range(6))
    assert max(stub.calls) == 32


def test_batch1_rate_matches_latency(stub: StubModel) -> None:
    latency = measure_latency(stub, np.zeros(4), reps=10, warmup=0, clock=stub.clock)
    throughput = measure_throughput(stub, np.zeros((1, 4)), max_n=0, reps=10, warmup=0, clock=stub.clock)
    assert throughput.points[0].mean_samples_per_sec == pytest.approx(expected_batch1_rate(latency))


def test_throughput_argument_checks(stub: StubModel) -> None:
    with pytest.raises(ValueError):
        measure_throughput(stub, np.zeros((1, 4)), max_n=-1, clock=stub.clock)
    with pytest.raises(ValueError):
        measure_throughput(stub, np.zeros((1, 4)), threads=0, clock=stub.clock)
    with pytest.raises(ValueError):
        measure_throughput(stub, np.zeros((0, 4)), clock=stub.clock)


def test_threaded_sweep_on_real_model() -> None:
    model = build_branch((10, 10, 1))
    data = np.random.default_rng(0).random((4, 10, 10, 1)).astype(np.float32)
    report = measure_throughput(model, data, max_n=3, reps=2, threads=2)
    assert report.threads == 2
    assert report.batch_sizes == [1, 2, 4, 8]
    assert all(p.mean_samples_per_sec > 0 for p in report.points)
    assert report.to_dict()["threads"] == 2


def test_size_report_for_final_model(tmp_path: Path) -> None:
    dual = build_dual_model((28, 28, 1))
    final = build_final_model([dual, dual], (28, 28, 1))
    report = size_report(final)
    assert report.params.count == 14_862
    assert report.summary_line() == "14,862 (58.05 KB)"
    assert report.disk_bytes is None

    save_checkpoint(final, tmp_path / "final")
    on_disk = size_report(final, tmp_path / "final")
    assert on_disk.disk_bytes == checkpoint_size_bytes(tmp_path / "final")
    assert on_disk.disk_bytes > 14_862 * 4
    assert on_disk.to_dict()["param_bytes"] == 14_862 * 4
