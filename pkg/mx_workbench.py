#!/usr/bin/env python3
"""
Multi-Exit Lab Workbench
Command-line entry point: train, evaluate, analyze, sweep and gen-data
"""

import asyncio
import functools
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from config.settings import StructuredLogger, WorkbenchSettings
from infrastructure.dataset_manager import generate_synthetic, write_dataset_csv
from infrastructure.experiment_runner import INSTRUMENTS, ExperimentRunner
from models.lab_models import RunConfig, load_run_config
from src.core.errors import ConfigError, LabError
from src.core.inference import Criterion
from src.core.regimes import RegimeKind, ScalingScheme

EXIT_CONFIG_ERROR = 2
EXIT_COMPUTE_ERROR = 3

logger = StructuredLogger("mx-lab")
console = Console(stderr=True)


def parse_budgets(text: str) -> list[float | None]:
    """Comma-separated percentages; 'unlimited' drops the cost constraint"""
    budgets: list[float | None] = []
    for item in text.split(","):
        item = item.strip().lower().rstrip("%")
        if not item:
            continue
        if item == "unlimited":
            budgets.append(None)
            continue
        try:
            value = float(item) / 100.0
        except ValueError:
            raise ConfigError(f"budget '{item}' is not a percentage") from None
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"budget {item}% outside (0, 100]")
        budgets.append(value)
    if not budgets:
        raise ConfigError("at least one budget is required")
    return budgets


def parse_seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got '{text}'") from None


def base_config(config_path: str | None, settings: WorkbenchSettings) -> RunConfig:
    """The config file when given, otherwise defaults seeded from MX_DEFAULT_SEED"""
    if config_path:
        return load_run_config(config_path)
    return RunConfig(seeds=[settings.compute.default_seed])


def lab_command(func: Callable[..., Any]) -> Callable[..., Any]:
    """Map library failures onto the CLI exit codes"""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"configuration error: {e}", command=func.__name__)
            console.print(f"[red]configuration error:[/red] {e}")
            sys.exit(EXIT_CONFIG_ERROR)
        except LabError as e:
            logger.error(f"{type(e).__name__}: {e}", command=func.__name__)
            console.print(f"[red]{type(e).__name__}:[/red] {e}")
            sys.exit(EXIT_COMPUTE_ERROR)
        except (OSError, ArithmeticError, ValueError) as e:
            logger.error(f"compute error: {e}", command=func.__name__)
            console.print(f"[red]error:[/red] {e}")
            sys.exit(EXIT_COMPUTE_ERROR)

    return wrapper


@click.group()
@click.option("--env-file", type=click.Path(dir_okay=False), default=".env", show_default=True)
@click.pass_context
def cli(ctx: click.Context, env_file: str) -> None:
    """Desk-scale laboratory for multi-exit networks."""
    load_dotenv(env_file, override=False)
    try:
        settings = WorkbenchSettings()
    except ConfigError as e:
        console.print(f"[red]configuration error:[/red] {e}")
        sys.exit(EXIT_CONFIG_ERROR)
    settings.configure_logging()
    ctx.obj = settings


def _runner(ctx: click.Context) -> ExperimentRunner:
    return ExperimentRunner(ctx.obj)


def _formats(fmt: tuple[str, ...]) -> tuple[str, ...]:
    return fmt or ("csv", "svg")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="run configuration JSON")
@click.option("--regime", type=click.Choice([k.value for k in RegimeKind]))
@click.option("--scaling", type=click.Choice([s.value for s in ScalingScheme]))
@click.option("--seed", type=int, multiple=True, help="overrides the config's seeds")
@click.option("--max-epochs", type=int)
@click.option("--out", "output_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "svg"]), multiple=True)
@click.pass_context
@lab_command
def train(
    ctx: click.Context,
    config_path: str | None,
    regime: str | None,
    scaling: str | None,
    seed: tuple[int, ...],
    max_epochs: int | None,
    output_dir: str | None,
    fmt: tuple[str, ...],
) -> None:
    """Train one model per seed under a regime and write its reports."""
    config = base_config(config_path, ctx.obj)
    config = config.with_overrides(
        **{
            "regime.kind": regime,
            "regime.scaling": scaling,
            "regime.max_epochs": max_epochs,
            "seeds": list(seed) or None,
            "output_dir": output_dir or (None if config_path else ctx.obj.output.output_dir),
        }
    )
    runner = _runner(ctx)
    for s in config.seeds:
        job_dir = Path(config.output_dir) / f"{config.regime.kind.value}-seed{s}"
        result = runner.run_training(config, s, job_dir, _formats(fmt))
        logger.info("training finished", seed=s, output_dir=str(job_dir), wall_clock=round(result.wall_clock, 3))
        click.echo(str(result.checkpoint_path))


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--criterion", type=click.Choice([c.value for c in Criterion]), default=Criterion.MAX_PROB.value)
@click.option("--budgets", default="25,50,75,100,unlimited", show_default=True)
@click.option("--out", "output_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "svg"]), multiple=True)
@click.pass_context
@lab_command
def evaluate(
    ctx: click.Context, checkpoint: str, criterion: str, budgets: str, output_dir: str | None, fmt: tuple[str, ...]
) -> None:
    """Calibrate exit thresholds on validation data and report budgets on test data."""
    out = Path(output_dir) if output_dir else Path(checkpoint).parent
    report = _runner(ctx).evaluate_checkpoint(checkpoint, criterion, parse_budgets(budgets), out, _formats(fmt))
    table = Table(title=f"budget report ({criterion})")
    for column in ("budget", "parameter", "val cost", "test cost", "test metric"):
        table.add_column(column, justify="right")
    for row in report.rows:
        table.add_row(row.label, f"{row.parameter:g}", f"{row.val_cost:.4f}", f"{row.test_cost:.4f}", f"{row.test_metric:.4f}")
    Console().print(table)


@cli.command()
@click.option("--instrument", type=click.Choice(list(INSTRUMENTS)), required=True)
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="val", show_default=True)
@click.option("--resolution", type=int)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "output_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "svg"]), multiple=True)
@click.pass_context
@lab_command
def analyze(
    ctx: click.Context,
    instrument: str,
    checkpoints: tuple[str, ...],
    split: str,
    resolution: int | None,
    seed: int,
    output_dir: str | None,
    fmt: tuple[str, ...],
) -> None:
    """Run an analysis instrument on one or more checkpoints."""
    out = Path(output_dir) if output_dir else Path(checkpoints[0]).parent / "analysis"
    _runner(ctx).run_analysis(instrument, list(checkpoints), out, _formats(fmt), split, resolution, seed)
    click.echo(str(out / f"{instrument}.csv"))


@cli.command()
@click.option("--configs", "config_paths", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True)
@click.option("--seeds", help="comma-separated seeds; defaults to each config's seeds")
@click.option("--jobs", type=int, help="worker count, capped by MX_THREADS")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default="runs/sweep", show_default=True)
@click.option("--threads/--processes", default=False, help="run jobs on threads instead of processes")
@click.pass_context
@lab_command
def sweep(
    ctx: click.Context, config_paths: tuple[str, ...], seeds: str | None, jobs: int | None, output_dir: str, threads: bool
) -> None:
    """Fan independent config/seed jobs out to a worker pool."""
    runner = _runner(ctx)
    summary = asyncio.run(runner.run_sweep(list(config_paths), parse_seeds(seeds), output_dir, jobs, threads))
    table = Table(title="sweep summary")
    for column in ("config", "regime", "seed", "budget", "test_cost", "test_metric"):
        table.add_column(column)
    for _, row in summary.iterrows():
        table.add_row(
            row["config"], row["regime"], str(row["seed"]), row["budget"], f"{row['test_cost']:.4f}", f"{row['test_metric']:.4f}"
        )
    Console().print(table)


@cli.command("gen-data")
@click.option("--kind", type=click.Choice(["spirals", "tiered-blobs"]), default="tiered-blobs", show_default=True)
@click.option("--n", type=int, default=3000, show_default=True)
@click.option("--d", type=int, default=8, show_default=True)
@click.option("--classes", type=int, default=4, show_default=True)
@click.option("--noise", type=float, default=0.35, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "output_path", type=click.Path(dir_okay=False), required=True)
@lab_command
def gen_data(kind: str, n: int, d: int, classes: int, noise: float, seed: int, output_path: str) -> None:
    """Write a synthetic dataset as CSV with a split column."""
    dataset = generate_synthetic(kind, n, d, classes, noise, seed)
    path = write_dataset_csv(dataset, output_path)
    logger.info("dataset written", path=str(path), provenance=dataset.provenance)
    click.echo(str(path))


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
