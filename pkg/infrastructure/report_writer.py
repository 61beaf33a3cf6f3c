"""
Report Writer for the Multi-Exit Lab
CSV tables and deterministic SVG plots for every record type, each stamped with the run configuration
"""

import io
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import orjson  # noqa: E402
import pandas as pd  # noqa: E402

from src.analysis.connectivity import REPORT_CLIP, ConnectivityGrid, GridMode  # noqa: E402
from src.analysis.gradient_dominance import GDTrace  # noqa: E402
from src.analysis.landscape import LandscapeGrid  # noqa: E402
from src.analysis.representation import MIProfile, RankProfile  # noqa: E402
from src.core.inference import BudgetReport, OperatingPoint  # noqa: E402
from src.core.regimes import TrainLog  # noqa: E402

logger = logging.getLogger(__name__)

Records = Any


def budget_frame(report: BudgetReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "budget": row.label,
                "parameter": row.parameter,
                "val_cost": row.val_cost,
                "test_cost": row.test_cost,
                "test_metric": row.test_metric,
            }
            for row in report.rows
        ],
        columns=["budget", "parameter", "val_cost", "test_cost", "test_metric"],
    )


def curve_frame(points: Sequence[OperatingPoint]) -> pd.DataFrame:
    rows = []
    for p in points:
        row: dict[str, Any] = {"parameter": p.parameter, "mean_cost": p.mean_cost, "metric": p.metric}
        for k, count in enumerate(p.histogram, start=1):
            row[f"exits_at_{k}"] = count
        rows.append(row)
    return pd.DataFrame(rows)


def to_frame(records: Records) -> pd.DataFrame:
    if isinstance(records, BudgetReport):
        return budget_frame(records)
    if isinstance(records, list) and records and isinstance(records[0], OperatingPoint):
        return curve_frame(records)
    if isinstance(records, TrainLog | GDTrace | RankProfile | MIProfile | ConnectivityGrid | LandscapeGrid):
        return records.to_frame()
    if isinstance(records, pd.DataFrame):
        return records
    raise TypeError(f"no CSV schema for {type(records).__name__}")


def _line_plot(ax: plt.Axes, x: Any, ys: dict[str, Any], xlabel: str, ylabel: str) -> None:
    for label, y in ys.items():
        ax.plot(x, y, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(ys) > 1:
        ax.legend(fontsize=7)


def _heat_map(ax: plt.Axes, xs: np.ndarray, ys: np.ndarray, values: np.ndarray, xlabel: str, ylabel: str) -> None:
    mesh = ax.pcolormesh(xs, ys, np.minimum(values, REPORT_CLIP).T, shading="nearest", vmin=0.0, vmax=REPORT_CLIP)
    ax.figure.colorbar(mesh, ax=ax, label=f"loss (clipped at {REPORT_CLIP:g})")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)


def plot_records(records: Records, ax: plt.Axes) -> None:
    if isinstance(records, list) and records and isinstance(records[0], OperatingPoint):
        ax.plot([p.mean_cost for p in records], [p.metric for p in records], marker=".")
        ax.set_xlabel("mean cost (fraction of backbone)")
        ax.set_ylabel("metric")
    elif isinstance(records, BudgetReport):
        frame = budget_frame(records)
        ax.bar(frame["budget"], frame["test_metric"])
        ax.set_xlabel("budget")
        ax.set_ylabel("test metric")
    elif isinstance(records, TrainLog):
        frame = records.to_frame()
        columns = [c for c in frame.columns if c.startswith("val_metric_exit_")]
        _line_plot(ax, frame["epoch"], {c: frame[c] for c in columns}, "epoch", "validation metric")
    elif isinstance(records, GDTrace):
        frame = records.to_frame()
        columns = [c for c in frame.columns if c.startswith("gd_exit_")]
        _line_plot(ax, frame["epoch"], {c: frame[c] for c in columns}, "epoch", "gradient dominance")
    elif isinstance(records, RankProfile):
        _line_plot(ax, [b.block for b in records.blocks], {"rank": records.ranks}, "block", "numerical rank")
    elif isinstance(records, MIProfile):
        _line_plot(ax, [b.block for b in records.blocks], {"I(X;Z)": records.bits}, "block", "bits")
    elif isinstance(records, ConnectivityGrid) and records.mode is GridMode.PATH:
        _line_plot(ax, records.axes[0], {"total": records.clipped()}, "lambda", "loss")
    elif isinstance(records, ConnectivityGrid):
        _heat_map(ax, records.axes[0], records.axes[1], records.total, "s (toward B)", "t (toward C)")
    elif isinstance(records, LandscapeGrid):
        _heat_map(ax, records.axis, records.axis, records.total, "x", "y")
    else:
        raise TypeError(f"no plot for {type(records).__name__}")


class ReportWriter:
    """Writes CSV and SVG artifacts that embed the materialised run configuration"""

    def __init__(self, output_dir: str | Path, run_config: dict[str, Any] | None = None, svg_hashsalt: str = "mx-lab"):
        self.output_dir = Path(output_dir)
        self.run_config = run_config or {}
        self.svg_hashsalt = svg_hashsalt
        self.writers: dict[str, Callable[[Records, Path, dict[str, Any]], Path]] = {
            "csv": self.write_csv,
            "svg": self.write_svg,
        }

    @property
    def config_json(self) -> str:
        return orjson.dumps(self.run_config, option=orjson.OPT_SORT_KEYS).decode("utf-8")

    def _header_lines(self, extra: dict[str, Any]) -> str:
        lines = [f"# run_config: {self.config_json}"]
        for key in sorted(extra):
            lines.append(f"# {key}: {extra[key]}")
        return "\n".join(lines) + "\n"

    def write_csv(self, records: Records, path: Path, header: dict[str, Any]) -> Path:
        frame = to_frame(records)
        buffer = io.StringIO()
        buffer.write(self._header_lines(header))
        frame.to_csv(buffer, index=False, float_format="%.12g", lineterminator="\n")
        path.write_text(buffer.getvalue(), encoding="utf-8")
        return path

    def write_svg(self, records: Records, path: Path, header: dict[str, Any]) -> Path:
        with plt.rc_context({"svg.hashsalt": self.svg_hashsalt, "svg.fonttype": "path"}):
            fig, ax = plt.subplots(figsize=(6.0, 4.5))
            try:
                plot_records(records, ax)
                if "title" in header:
                    ax.set_title(str(header["title"]))
                fig.tight_layout()
                fig.savefig(path, format="svg", metadata={"Date": None, "Description": self.config_json})
            finally:
                plt.close(fig)
        return path

    def emit(self, records: Records, name: str, formats: Sequence[str] = ("csv",), **header: Any) -> list[Path]:
        if records is None or (isinstance(records, list) and not records):
            raise ValueError(f"report '{name}' has no records")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for fmt in formats:
            if fmt not in self.writers:
                raise ValueError(f"unsupported report format '{fmt}'")
            path = self.output_dir / f"{name}.{fmt}"
            try:
                written.append(self.writers[fmt](records, path, header))
            except OSError as e:
                logger.error(f"failed to write {path}: {e}")
                raise
            logger.info(f"report written: {path}")
        return written


def emit_report(
    records: Records,
    fmt: str,
    path: str | Path,
    run_config: dict[str, Any] | None = None,
    svg_hashsalt: str = "mx-lab",
    **header: Any,
) -> Path:
    path = Path(path)
    writer = ReportWriter(path.parent, run_config, svg_hashsalt)
    return writer.emit(records, path.stem, (fmt,), **header)[0]
