#!/usr/bin/env python3
"""
Desk-Scale Trend Check for the Multi-Exit Lab
Compares mixed, joint and disjoint training on tiered blobs and reports whether the expected orderings hold
"""

import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.settings import StructuredLogger, WorkbenchSettings  # noqa: E402
from infrastructure.experiment_runner import ExperimentRunner  # noqa: E402
from models.lab_models import RunConfig  # noqa: E402

REGIMES = ("mixed", "joint", "disjoint")
SEEDS = (0, 1, 2)

logger = StructuredLogger("mx-lab.trend")


def trend_config(regime: str, max_epochs: int, patience: int) -> RunConfig:
    """Seven blocks with an exit after each one"""
    return RunConfig.model_validate(
        {
            "dataset": {"kind": "tiered-blobs", "n": 3000, "d": 8, "classes": 4, "noise": 0.35, "seed": 0},
            "model": {"width": 32, "num_blocks": 7, "placements": [1, 2, 3, 4, 5, 6, 7]},
            "regime": {"kind": regime, "max_epochs": max_epochs, "patience": patience, "batch_size": 64, "lr": 5e-3},
            "policy": {"criterion": "max_prob", "budgets": [0.25, 1.0]},
            "seeds": list(SEEDS),
        }
    )


def margin_check(scores: pd.DataFrame, better: str, worse: str, budget: str) -> dict[str, object]:
    """better beats worse by more than one pooled standard deviation"""
    a = scores[(scores.regime == better) & (scores.budget == budget)].test_metric.to_numpy()
    b = scores[(scores.regime == worse) & (scores.budget == budget)].test_metric.to_numpy()
    pooled = float(np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)) if len(a) > 1 and len(b) > 1 else 0.0
    gap = float(a.mean() - b.mean())
    return {
        "check": f"{better} > {worse} at {budget}",
        "mean_better": float(a.mean()),
        "mean_worse": float(b.mean()),
        "gap": gap,
        "pooled_std": pooled,
        "passed": gap > pooled,
    }


@click.command()
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default="runs/trend", show_default=True)
@click.option("--max-epochs", type=int, default=60, show_default=True)
@click.option("--patience", type=int, default=10, show_default=True)
@click.option("--strict", is_flag=True, help="exit 1 when a trend check fails")
def main(output_dir: str, max_epochs: int, patience: int, strict: bool) -> None:
    settings = WorkbenchSettings()
    settings.configure_logging()
    runner = ExperimentRunner(settings)
    out = Path(output_dir)
    started = time.perf_counter()

    rows = []
    for regime in REGIMES:
        config = trend_config(regime, max_epochs, patience)
        for seed in SEEDS:
            result = runner.run_training(config, seed, out / f"{regime}-seed{seed}", formats=("csv",))
            for row in result.budget_report.rows:
                rows.append({"regime": regime, "seed": seed, "budget": row.label, "test_metric": row.test_metric})
    scores = pd.DataFrame(rows)
    checks = pd.DataFrame(
        [margin_check(scores, "mixed", "joint", "100%"), margin_check(scores, "joint", "disjoint", "25%")]
    )
    elapsed = time.perf_counter() - started

    out.mkdir(parents=True, exist_ok=True)
    scores.to_csv(out / "trend_scores.csv", index=False, lineterminator="\n")
    checks.to_csv(out / "trend_report.csv", index=False, lineterminator="\n")
    logger.info("trend check finished", runtime_seconds=round(elapsed, 1), passed=bool(checks.passed.all()))

    table = Table(title=f"trend check ({elapsed:.0f}s)")
    for column in ("check", "gap", "pooled_std", "passed"):
        table.add_column(column)
    for _, check in checks.iterrows():
        table.add_row(check["check"], f"{check['gap']:.4f}", f"{check['pooled_std']:.4f}", str(check["passed"]))
    Console().print(table)
    if strict and not checks.passed.all():
        sys.exit(1)


if __name__ == "__main__":
    main()
