"""Integration tests for the CLI (synthetic dataset on disk, run commands, verify outputs)."""

import dataclasses
import hashlib
import json
import re
import tomllib
from pathlib import Path

import pytest

from featherlite import __version__, dataio
from featherlite.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from featherlite.dataio import DATASETS, write_synthetic_dataset


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory: pytest.TempPathFactory) -> dict[str, Path]:
    """Train once on a tiny synthetic MNIST and share the run directory."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    write_synthetic_dataset("mnist", data_dir, train_size=120, test_size=40)
    out_dir = root / "runs"
    code = main(
        [
            "train",
            "mnist",
            "--data-dir",
            str(data_dir),
            "--out-dir",
            str(out_dir),
            "--epoch-scale",
            "0.05",
            "--val-size",
            "20",
            "--folds",
            "2",
            "--batch-size",
            "16",
            "--no-progress",
        ]
    )
    assert code == EXIT_OK
    return {"data_dir": data_dir, "run_dir": out_dir / "mnist-seed42"}


def test_version(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == f"featherlite {__version__}"


def test_help_exits_cleanly(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for command in ("fetch-data", "train", "eval", "bench", "report"):
        assert command in out


def test_cli_imports_are_declared_dependencies() -> None:
    """Every package the CLI imports directly is pinned in the project manifest."""
    root = Path(__file__).resolve().parents[1]
    with open(root / "pyproject.toml", "rb") as f:
        declared = tomllib.load(f)["project"]["dependencies"]
    names = {re.split(r"[\[<>=]", spec, maxsplit=1)[0].strip() for spec in declared}
    requirements = (root / "requirements.txt").read_text(encoding="utf-8")
    for package in ("click", "typer"):
        assert package in names
        assert re.search(rf"^{package}\b", requirements, flags=re.MULTILINE)


def test_unknown_command_is_usage_error() -> None:
    assert main(["tune"]) == EXIT_USAGE


def test_unknown_dataset_is_usage_error(tmp_path: Path) -> None:
    assert main(["train", "svhn", "--data-dir", str(tmp_path)]) == EXIT_USAGE


def test_invalid_setting_is_usage_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["train", "mnist", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path), "--folds", "1"])
    assert code == EXIT_USAGE
    assert "Folds must be at least 2" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path: Path) -> None:
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"batchsize": 8}), encoding="utf-8")
    assert main(["train", "mnist", "--config", str(config)]) == EXIT_USAGE


def test_missing_dataset_is_runtime_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["train", "mnist", "--data-dir", str(tmp_path / "none"), "--out-dir", str(tmp_path / "runs")])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "Stage s1" in err
    assert "fetch-data" in err


def test_train_prints_report(trained_run: dict[str, Path]) -> None:
    run_dir = trained_run["run_dir"]
    assert (run_dir / "summary.json").exists()
    assert (run_dir / "checkpoints" / "final.manifest.json").exists()
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["size"]["summary"] == "14,862 (58.05 KB)"
    assert summary["dataset"] == "mnist"


def test_report_regenerates_outputs(trained_run: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    run_dir = trained_run["run_dir"]
    (run_dir / "summary.json").unlink()
    assert main(["report", str(run_dir)]) == EXIT_OK
    assert (run_dir / "summary.json").exists()
    assert (run_dir / "charts" / "s1_dual.svg").exists()
    out = capsys.readouterr().out
    assert "Test accuracy:" in out
    assert "Parameters: 14,862 (58.05 KB)" in out


def test_eval_prints_classification_report(
    trained_run: dict[str, Path], capsys: pytest.CaptureFixture[str]
) -> None:
    model = trained_run["run_dir"] / "checkpoints" / "final"
    data_dir = str(trained_run["data_dir"])
    code = main(["eval", "mnist", "--model", str(model), "--data-dir", data_dir, "--limit", "20"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "Precision" in out
    assert "(20 samples)" in out


def test_bench_writes_reports(trained_run: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    model = trained_run["run_dir"] / "checkpoints" / "final"
    code = main(
        [
            "bench",
            "--model",
            str(model),
            "--reps",
            "2",
            "--warmup",
            "0",
            "--max-batch-exp",
            "2",
            "--threads",
            "2",
        ]
    )
    assert code == EXIT_OK
    bench_dir = trained_run["run_dir"] / "bench"
    for name in ("latency.json", "throughput.csv", "throughput_threads2.csv", "size.json"):
        assert (bench_dir / name).exists(), name
    out = capsys.readouterr().out
    assert "Size: 14,862 (58.05 KB)" in out


def test_bench_rejects_too_few_reps(trained_run: dict[str, Path]) -> None:
    model = trained_run["run_dir"] / "checkpoints" / "final"
    assert main(["bench", "--model", str(model), "--reps", "1"]) == EXIT_USAGE


def test_eval_missing_checkpoint_is_runtime_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["eval", "mnist", "--model", str(tmp_path / "nope")]) == EXIT_RUNTIME
    assert "Checkpoint could not be loaded" in capsys.readouterr().err


def test_report_on_plain_directory_is_runtime_error(tmp_path: Path) -> None:
    assert main(["report", str(tmp_path)]) == EXIT_RUNTIME


def _fake_mnist(monkeypatch: pytest.MonkeyPatch, md5: str) -> None:
    spec = dataclasses.replace(
        DATASETS["mnist"], urls={"labels.gz": "https://example.invalid/labels.gz"}, md5={"labels.gz": md5}
    )
    monkeypatch.setitem(DATASETS, "mnist", spec)
    monkeypatch.setattr(dataio, "_download", lambda url, target, progress: target.write_bytes(b"abc"))


def test_fetch_data_records_checksums(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    _fake_mnist(monkeypatch, hashlib.md5(b"abc").hexdigest())
    assert main(["fetch-data", "mnist", "--data-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "mnist" / "SHA256SUMS").exists()


def test_fetch_data_checksum_failure(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
) -> None:
    _fake_mnist(monkeypatch, "0" * 32)
    assert main(["fetch-data", "mnist", "--data-dir", str(tmp_path)]) == EXIT_RUNTIME
    assert "checksum" in capsys.readouterr().err
