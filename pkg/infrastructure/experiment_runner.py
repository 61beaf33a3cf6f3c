"""
Experiment Runner for the Multi-Exit Lab
Training jobs, checkpoint evaluation, analysis instruments and multi-seed sweeps
"""

import asyncio
import logging
import time
from collections.abc import Sequence
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import orjson
import pandas as pd
from pydantic import ValidationError

from config.settings import WorkbenchSettings
from infrastructure.checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from infrastructure.dataset_manager import generate_synthetic, load_csv_dataset
from infrastructure.report_writer import ReportWriter
from models.lab_models import (
    CheckpointProvenance,
    DatasetConfig,
    RunConfig,
    SweepRow,
    load_run_config,
    parse_run_config,
)
from src.analysis.connectivity import interpolate_loss, plane_loss
from src.analysis.gradient_dominance import GDRecorder, GDTrace, gradient_dominance
from src.analysis.landscape import DEFAULT_RESOLUTION, loss_landscape
from src.analysis.permutation import weight_match
from src.analysis.representation import DEFAULT_BINS, DEFAULT_REL_TOL, mi_profile, rank_profile
from src.core.datasets import Dataset
from src.core.errors import ConfigError
from src.core.inference import BudgetReport, Criterion, OperatingPoint, calibrate_budgets, operating_curve
from src.core.multiexit import MultiExitModel, build_model
from src.core.regimes import TrainLog, loss_weights, run_regime

logger = logging.getLogger(__name__)

INSTRUMENTS = ("gd", "rank", "mi", "path", "plane", "landscape")
PATH_POINTS = 21


def load_dataset(config: DatasetConfig) -> Dataset:
    if config.kind == "csv":
        assert config.csv_path is not None
        return load_csv_dataset(config.csv_path, config.label_column, config.fractions, config.seed, config.task)
    return generate_synthetic(
        config.kind, config.n, config.d, config.classes, config.noise, config.seed, config.fractions
    )


def build_run_model(config: RunConfig, dataset: Dataset, seed: int) -> MultiExitModel:
    return build_model(
        config.model.backbone(dataset.num_features),
        config.model.resolved_placements(),
        config.model.head(),
        dataset.task,
        seed,
    )


@dataclass
class JobResult:
    seed: int
    model: MultiExitModel
    log: TrainLog
    budget_report: BudgetReport
    curve: list[OperatingPoint]
    gd_trace: GDTrace
    checkpoint_path: Path
    output_dir: Path
    wall_clock: float
    artifacts: list[Path] = field(default_factory=list)


class ExperimentRunner:
    """Runs one job per call; sweeps fan jobs out to a worker pool"""

    def __init__(self, settings: WorkbenchSettings | None = None):
        self.settings = settings or WorkbenchSettings()

    def _writer(self, output_dir: Path, config: RunConfig) -> ReportWriter:
        return ReportWriter(output_dir, config.materialized(), self.settings.output.svg_hashsalt)

    def run_training(
        self,
        config: RunConfig,
        seed: int,
        output_dir: str | Path,
        formats: Sequence[str] = ("csv", "svg"),
    ) -> JobResult:
        output_dir = Path(output_dir)
        started = time.perf_counter()
        logger.info(f"training {config.regime.kind.value}/{config.regime.scaling.value} seed={seed} -> {output_dir}")
        try:
            dataset = load_dataset(config.dataset)
            model = build_run_model(config, dataset, seed)
            probe = dataset.train.head(min(config.regime.gd_probe_size, len(dataset.train)))
            recorder = GDRecorder(probe, model.num_exits, every=config.regime.gd_every)
            result = run_regime(config.regime.to_spec(), model, dataset, seed=seed, callbacks=[recorder])
        except Exception as e:
            logger.error(f"training job seed={seed} failed: {e}")
            raise

        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "run_config.json").write_bytes(
            orjson.dumps(config.materialized(), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)
        )
        provenance = CheckpointProvenance(
            regime=config.regime.kind,
            scaling=config.regime.scaling,
            alpha=[float(a) for a in result.alpha.alpha],
            seed=seed,
            run_config=config.materialized(),
        )
        checkpoint_path = save_checkpoint(
            result.model, output_dir / "model.mxckpt", provenance.model_dump(mode="json")
        )
        writer = self._writer(output_dir, config)
        artifacts = [checkpoint_path]
        artifacts += writer.emit(result.log, "train_log", ("csv",), seed=seed, objective_steps=result.log.objective_steps)

        try:
            report = calibrate_budgets(
                result.model, config.policy.criterion, dataset.val, dataset.test, config.policy.budgets
            )
            curve = operating_curve(result.model, config.policy.criterion, dataset.test)
        except Exception as e:
            logger.error(f"calibration for seed={seed} failed; checkpoint kept at {checkpoint_path}: {e}")
            raise

        header = {
            "criterion": config.policy.criterion.value,
            "alpha_scheme": config.regime.scaling.value,
            "seed": seed,
            "calibration": "validation split; reported on test split",
        }
        if config.regime.kind.value == "alternating":
            header["optimizer"] = "one AdamW state shared by both objectives"
        artifacts += writer.emit(report, "budget_report", formats, **header)
        artifacts += writer.emit(curve, "operating_curve", formats, **header)
        if recorder.trace.epochs:
            artifacts += writer.emit(recorder.trace, "gradient_dominance", formats, seed=seed)
        elapsed = time.perf_counter() - started
        logger.info(f"training job seed={seed} finished in {elapsed:.1f}s")
        return JobResult(
            seed=seed,
            model=result.model,
            log=result.log,
            budget_report=report,
            curve=curve,
            gd_trace=recorder.trace,
            checkpoint_path=checkpoint_path,
            output_dir=output_dir,
            wall_clock=elapsed,
            artifacts=artifacts,
        )

    # -- checkpoints ----------------------------------------------------

    @staticmethod
    def checkpoint_context(checkpoint: Checkpoint) -> tuple[RunConfig, Dataset]:
        try:
            provenance = CheckpointProvenance.model_validate(checkpoint.provenance)
        except ValidationError as e:
            raise ConfigError(f"checkpoint carries no usable training provenance: {e}") from e
        config = parse_run_config(provenance.run_config)
        return config, load_dataset(config.dataset)

    def evaluate_checkpoint(
        self,
        checkpoint_path: str | Path,
        criterion: Criterion | str,
        budgets: Sequence[float | None],
        output_dir: str | Path,
        formats: Sequence[str] = ("csv", "svg"),
    ) -> BudgetReport:
        checkpoint = load_checkpoint(checkpoint_path)
        config, dataset = self.checkpoint_context(checkpoint)
        model = checkpoint.to_model()
        criterion = Criterion(criterion)
        report = calibrate_budgets(model, criterion, dataset.val, dataset.test, budgets)
        curve = operating_curve(model, criterion, dataset.test)
        writer = self._writer(Path(output_dir), config)
        header = {"criterion": criterion.value, "checkpoint": Path(checkpoint_path).name}
        writer.emit(report, f"budget_report_{criterion.value}", formats, **header)
        writer.emit(curve, f"operating_curve_{criterion.value}", formats, **header)
        return report

    def run_analysis(
        self,
        instrument: str,
        checkpoint_paths: Sequence[str | Path],
        output_dir: str | Path,
        formats: Sequence[str] = ("csv", "svg"),
        split: str = "val",
        resolution: int | None = None,
        seed: int = 0,
    ) -> Any:
        if instrument not in INSTRUMENTS:
            raise ConfigError(f"unknown instrument '{instrument}'; expected one of {', '.join(INSTRUMENTS)}")
        needed = {"path": 2, "plane": 3}.get(instrument, 1)
        if len(checkpoint_paths) != needed:
            raise ConfigError(f"instrument '{instrument}' needs {needed} checkpoint(s), got {len(checkpoint_paths)}")
        checkpoints = [load_checkpoint(p) for p in checkpoint_paths]
        config, dataset = self.checkpoint_context(checkpoints[0])
        models = [c.to_model() for c in checkpoints]
        data = dataset.split(split)
        alpha = loss_weights(config.regime.scaling, models[0].num_exits, models[0].cost_model())

        if instrument == "gd":
            probe = data.head(min(config.regime.gd_probe_size, len(data)))
            records: Any = GDTrace(models[0].num_exits)
            records.record(0, "checkpoint", gradient_dominance(models[0], probe, alpha))
        elif instrument == "rank":
            records = rank_profile(models[0], data, DEFAULT_REL_TOL)
        elif instrument == "mi":
            records = mi_profile(models[0], data, DEFAULT_BINS)
        elif instrument == "path":
            match = weight_match(models[0], models[1], seed)
            records = interpolate_loss(models[0], models[1], match.permutation, np.linspace(0.0, 1.0, PATH_POINTS), data, alpha)
        elif instrument == "plane":
            records = plane_loss(models[0], models[1], models[2], resolution or 21, data, alpha, seed)
        else:
            records = loss_landscape(models[0], data, resolution or DEFAULT_RESOLUTION, seed, alpha)

        writer = self._writer(Path(output_dir), config)
        writer.emit(records, instrument, formats, instrument=instrument, split=split, title=instrument)
        return records

    # -- sweeps ---------------------------------------------------------

    async def run_sweep(
        self,
        config_paths: Sequence[str | Path],
        seeds: Sequence[int] | None,
        output_dir: str | Path,
        jobs: int | None = None,
        use_threads: bool = False,
    ) -> pd.DataFrame:
        """Independent (config, seed) jobs on a pool; the summary order does not depend on completion order"""
        stems = [Path(p).stem for p in config_paths]
        shared = sorted({s for s in stems if stems.count(s) > 1})
        if shared:
            raise ConfigError(f"sweep configs share file names {shared}; their job directories would collide")
        output_dir = Path(output_dir)
        plan = []
        for path in config_paths:
            config = load_run_config(path)
            for seed in seeds if seeds else config.seeds:
                job_dir = output_dir / Path(path).stem / f"{config.regime.kind.value}-seed{seed}"
                plan.append((str(path), int(seed), str(job_dir)))
        workers = self.settings.worker_count(jobs)
        logger.info(f"sweep: {len(plan)} jobs on {workers} workers")

        executor: Executor = ThreadPoolExecutor(workers) if use_threads else ProcessPoolExecutor(workers)
        loop = asyncio.get_running_loop()
        try:
            with executor:
                futures = [loop.run_in_executor(executor, sweep_job, *job) for job in plan]
                results = await asyncio.gather(*futures)
        except Exception as e:
            logger.error(f"sweep failed: {e}")
            raise

        rows = [row for job_rows in results for row in job_rows]
        summary = pd.DataFrame(rows, columns=list(SweepRow.model_fields))
        output_dir.mkdir(parents=True, exist_ok=True)
        summary.to_csv(output_dir / "sweep_summary.csv", index=False, float_format="%.12g", lineterminator="\n")
        return summary


def sweep_job(config_path: str, seed: int, output_dir: str) -> list[dict[str, Any]]:
    """Process-pool entry point: one training job, summarised per budget"""
    config = load_run_config(config_path)
    result = ExperimentRunner().run_training(config, seed, output_dir)
    return [
        SweepRow(
            config=Path(config_path).stem,
            regime=config.regime.kind.value,
            scaling=config.regime.scaling.value,
            seed=seed,
            criterion=config.policy.criterion.value,
            budget=row.label,
            parameter=row.parameter,
            val_cost=row.val_cost,
            test_cost=row.test_cost,
            test_metric=row.test_metric,
        ).model_dump()
        for row in result.budget_report.rows
    ]
