"""Command-line entry point: fetch-data, train, eval, bench, report."""

import logging
import sys
from enum import Enum
from pathlib import Path
from typing import Annotated, Any

import click
import numpy as np
import typer

from featherlite import __version__
from featherlite.benchmark import MAX_BATCH_EXP, measure_latency, measure_throughput, size_report
from featherlite.checkpoint import CheckpointError, checkpoint_paths, load_checkpoint
from featherlite.dataio import DATASETS, DatasetError, describe_dataset_error, fetch_dataset, load_dataset
from featherlite.pipeline import PipelineStageError, run_pipeline
from featherlite.pipeline_settings import PipelineSettings, default_data_dir
from featherlite.report import (
    BENCH_DIR,
    CHECKPOINT_DIR,
    emit_benchmark_reports,
    emit_reports,
    format_run_summary,
    load_run_bundle,
)
from featherlite.tensor import ConfigurationError, RngStream
from featherlite.trainer import evaluate
from featherlite.utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

app = typer.Typer(
    name="featherlite",
    help="Train, evaluate, and benchmark lightweight dual-branch CNN classifiers.",
    add_completion=False,
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


class Stage(str, Enum):
    s1 = "s1"
    s2 = "s2"
    s3 = "s3"
    all = "all"


def _check_dataset(name: str) -> str:
    if name not in DATASETS:
        raise typer.BadParameter(f"unknown dataset '{name}' (choose from {', '.join(sorted(DATASETS))})")
    return name


DatasetArg = Annotated[str, typer.Argument(help="mnist, fashion or cifar10", callback=_check_dataset)]
DataDirOpt = Annotated[
    Path | None,
    typer.Option("--data-dir", help="Dataset root (default: $FEATHERLITE_DATA_DIR or ./data)"),
]
VerboseOpt = Annotated[bool, typer.Option("--verbose", "-v", help="Enable DEBUG logging")]


@app.callback()
def _main_callback() -> None:
    """Lightweight CNN training pipeline."""


@app.command("fetch-data")
def fetch_data(
    dataset: DatasetArg,
    data_dir: DataDirOpt = None,
    force: Annotated[bool, typer.Option("--force", help="Download again even if present")] = False,
    verbose: VerboseOpt = False,
) -> None:
    """Download a dataset and record checksums of its files."""
    setup_logging(verbose)
    directory = fetch_dataset(
        dataset, data_dir or default_data_dir(), force=force, progress=sys.stderr.isatty()
    )
    typer.echo(f"{dataset} ready in {directory}")


@app.command()
def train(
    dataset: DatasetArg,
    stage: Annotated[
        Stage, typer.Option("--stage", help="Stage to run; s2/s3 resume from the run dir")
    ] = Stage.all,
    seed: Annotated[int | None, typer.Option("--seed")] = None,
    config: Annotated[Path | None, typer.Option("--config", help="JSON pipeline settings")] = None,
    data_dir: DataDirOpt = None,
    out_dir: Annotated[Path | None, typer.Option("--out-dir", help="Parent of run directories")] = None,
    batch_size: Annotated[int | None, typer.Option("--batch-size")] = None,
    epoch_scale: Annotated[
        float | None, typer.Option("--epoch-scale", help="Multiply every stage cap")
    ] = None,
    train_limit: Annotated[int | None, typer.Option("--train-limit")] = None,
    val_limit: Annotated[int | None, typer.Option("--val-limit")] = None,
    test_limit: Annotated[int | None, typer.Option("--test-limit")] = None,
    val_size: Annotated[int | None, typer.Option("--val-size")] = None,
    folds: Annotated[int | None, typer.Option("--folds")] = None,
    max_workers: Annotated[int | None, typer.Option("--max-workers", help="Augmentation threads")] = None,
    progress: Annotated[bool | None, typer.Option("--progress/--no-progress")] = None,
    verbose: VerboseOpt = False,
) -> None:
    """Run the staged training pipeline and print the final report."""
    setup_logging(verbose)
    settings = PipelineSettings.from_json_file(config) if config else PipelineSettings()
    settings = settings.with_overrides(
        dataset=dataset,
        seed=seed,
        data_dir=data_dir,
        out_dir=out_dir,
        batch_size=batch_size,
        epoch_scale=epoch_scale,
        train_limit=train_limit,
        val_limit=val_limit,
        test_limit=test_limit,
        val_size=val_size,
        folds=folds,
        max_workers=max_workers,
        progress=progress,
        verbose=verbose or None,
    )
    issues = settings.validate()
    if issues:
        raise typer.BadParameter("; ".join(issue.message for issue in issues))
    bundle = run_pipeline(settings, stage.value)
    report = bundle.report
    if report is not None:
        typer.echo(report.render_text(f"{dataset} test set"))
    typer.echo(format_run_summary(bundle), nl=False)


@app.command("eval")
def eval_model(
    dataset: DatasetArg,
    model: Annotated[Path, typer.Option("--model", help="Checkpoint manifest or stem")],
    data_dir: DataDirOpt = None,
    limit: Annotated[int | None, typer.Option("--limit", help="Evaluate the first N test samples")] = None,
    verbose: VerboseOpt = False,
) -> None:
    """Evaluate a checkpoint on the test split and print the classification report."""
    setup_logging(verbose)
    graph = load_checkpoint(model)
    test = load_dataset(dataset, data_dir or default_data_dir()).test.head(limit)
    evaluation = evaluate(graph, test)
    typer.echo(evaluation.report.render_text(f"{dataset} test set ({checkpoint_paths(model)[0].name})"))


def _bench_out_dir(model: Path) -> Path:
    """``<run>/bench`` for checkpoints inside a run directory, else ``./bench``."""
    manifest, _ = checkpoint_paths(model)
    if manifest.parent.name == CHECKPOINT_DIR:
        return manifest.parent.parent / BENCH_DIR
    return Path(BENCH_DIR)


@app.command()
def bench(
    model: Annotated[Path, typer.Option("--model", help="Checkpoint manifest or stem")],
    reps: Annotated[int, typer.Option("--reps", min=2)] = 100,
    warmup: Annotated[int, typer.Option("--warmup", min=0)] = 10,
    max_batch_exp: Annotated[int, typer.Option("--max-batch-exp", min=0)] = MAX_BATCH_EXP,
    out: Annotated[Path | None, typer.Option("--out", help="Output directory")] = None,
    threads: Annotated[int, typer.Option("--threads", min=1, help="Opt-in multi-thread sweep")] = 1,
    dataset: Annotated[str | None, typer.Option("--dataset", help="Sample real test images")] = None,
    data_dir: DataDirOpt = None,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    verbose: VerboseOpt = False,
) -> None:
    """Measure latency, throughput over batch sizes, and model size."""
    setup_logging(verbose)
    graph = load_checkpoint(model)
    shape = tuple(next(iter(graph.inputs.values())))
    if dataset:
        _check_dataset(dataset)
        data = load_dataset(dataset, data_dir or default_data_dir()).test.head(1 << max_batch_exp).images
    else:
        data = RngStream(seed, "bench").generator().random((64, *shape), dtype=np.float32)
    name = dataset or "synthetic"
    latency = measure_latency(graph, data[0], reps=reps, warmup=warmup, dataset=name)
    sweeps = [measure_throughput(graph, data, max_batch_exp, reps, dataset=name)]
    if threads > 1:
        sweeps.append(measure_throughput(graph, data, max_batch_exp, reps, dataset=name, threads=threads))
    size = size_report(graph, model)
    out_dir = out or _bench_out_dir(model)
    emit_benchmark_reports(out_dir, latency=latency, throughput=sweeps[0], size=size)
    if len(sweeps) > 1:
        emit_benchmark_reports(out_dir, throughput=sweeps[1])
    typer.echo(f"Latency: {latency.mean_ms:.3f} ms (std {latency.std_ms:.3f}, {latency.span})")
    for sweep in sweeps:
        top = max(sweep.points, key=lambda p: p.mean_samples_per_sec, default=None)
        peak = f"{top.mean_samples_per_sec:,.0f} samples/s at batch {top.batch_size}" if top else "no points"
        typer.echo(f"Throughput ({sweep.threads} thread(s)): {peak}; {sweep.termination}")
    typer.echo(f"Size: {size.summary_line()}")
    typer.echo(f"Reports written to {out_dir}")


@app.command()
def report(
    run_dir: Annotated[Path, typer.Argument(help="Run directory created by 'train'")],
    verbose: VerboseOpt = False,
) -> None:
    """Regenerate CSV, JSON, and SVG reports for a run without retraining."""
    setup_logging(verbose)
    bundle = load_run_bundle(run_dir)
    written = emit_reports(bundle)
    typer.echo(format_run_summary(bundle), nl=False)
    typer.echo(f"{len(written)} files written to {run_dir}")


def _runtime_message(exc: BaseException) -> str:
    cause: BaseException | None = exc
    if isinstance(exc, PipelineStageError) and exc.__cause__ is not None:
        cause = exc.__cause__
    if isinstance(cause, DatasetError | PermissionError):
        advice = describe_dataset_error(None, cause)
        prefix = f"Stage {exc.stage}: " if isinstance(exc, PipelineStageError) else ""
        return f"{prefix}{advice.reason}\n{advice.suggestion}"
    if isinstance(exc, CheckpointError):
        return f"Checkpoint could not be loaded: {exc}"
    return f"{type(exc).__name__}: {exc}"


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and return an exit code (0 ok, 1 usage error, 2 runtime failure)."""
    args = list(sys.argv[1:] if argv is None else argv)
    if args in (["--version"], ["-V"]):
        typer.echo(f"featherlite {__version__}")
        return EXIT_OK
    command = typer.main.get_command(app)
    try:
        result: Any = command.main(args=args, prog_name="featherlite", standalone_mode=False)
    except click.UsageError as exc:
        if exc.ctx is not None:
            typer.echo(exc.ctx.get_usage(), err=True)
        typer.echo(f"Error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.Abort:
        typer.echo("Aborted.", err=True)
        return EXIT_RUNTIME
    except click.ClickException as exc:
        typer.echo(f"Error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except ConfigurationError as exc:
        typer.echo(f"Invalid configuration: {exc}", err=True)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("Command failed", exc_info=exc)
        typer.echo(_runtime_message(exc), err=True)
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
