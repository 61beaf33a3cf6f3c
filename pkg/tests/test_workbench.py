"""
Tests for the workbench infrastructure
Datasets, CSV ingestion, checkpoints, reports, run configuration and settings
"""

import logging

import numpy as np
import orjson
import pandas as pd
import pytest
from conftest import make_model, make_split
from sklearn.linear_model import LogisticRegression

from config.settings import JSONFormatter, WorkbenchSettings
from infrastructure.checkpoint_store import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from infrastructure.dataset_manager import (
    generate_synthetic,
    load_csv_dataset,
    split_sizes,
    write_dataset_csv,
)
from infrastructure.report_writer import ReportWriter, emit_report, to_frame
from models.lab_models import RunConfig, load_run_config, parse_run_config
from src.analysis.permutation import weight_match
from src.core.errors import ConfigError, CorruptCheckpointError, DatasetError, VersionMismatchError
from src.core.inference import BudgetReport, BudgetRow, Criterion, operating_curve
from src.core.multiexit import TaskKind


def budget_report() -> BudgetReport:
    rows = [
        BudgetRow(0.25, 0.9, 0.24, 0.6, 0.25, 0.58),
        BudgetRow(0.5, 0.7, 0.49, 0.7, 0.5, 0.69),
        BudgetRow(0.75, 0.55, 0.7, 0.75, 0.72, 0.74),
        BudgetRow(1.0, 0.4, 0.8, 0.76, 0.81, 0.75),
        BudgetRow(None, 0.4, 0.8, 0.76, 0.81, 0.75),
    ]
    return BudgetReport(Criterion.MAX_PROB, True, rows)


@pytest.mark.unit
class TestSyntheticData:
    def test_deterministic_under_seed(self):
        a = generate_synthetic("spirals", 90, 3, 3, 0.2, seed=4)
        b = generate_synthetic("spirals", 90, 3, 3, 0.2, seed=4)
        for name in ("train", "val", "test"):
            np.testing.assert_array_equal(a.split(name).features, b.split(name).features)
            np.testing.assert_array_equal(a.split(name).targets, b.split(name).targets)
        assert a.provenance == b.provenance

    @pytest.mark.parametrize("kind", ["spirals", "tiered-blobs"])
    def test_stratified_splits_are_balanced(self, kind):
        dataset = generate_synthetic(kind, 90, 4, 4, 0.3, seed=1)
        assert [len(s) for s in dataset.splits().values()] == split_sizes(90)
        for split in dataset.splits().values():
            counts = np.bincount(split.targets, minlength=4)
            assert counts.max() - counts.min() <= 1

    def test_noise_free_blobs_are_linearly_separable(self):
        dataset = generate_synthetic("tiered-blobs", 300, 4, 3, 0.0, seed=2)
        features = np.vstack([s.features for s in dataset.splits().values()])
        labels = np.concatenate([s.targets for s in dataset.splits().values()])
        classifier = LogisticRegression(C=1e6, max_iter=10000).fit(features, labels)
        assert classifier.score(features, labels) >= 0.98

    def test_split_sizes(self):
        assert split_sizes(10) == [7, 1, 2]
        assert split_sizes(100) == [70, 15, 15]
        assert split_sizes(0) == [0, 0, 0]
        with pytest.raises(DatasetError):
            split_sizes(10, (0.5, 0.5, 0.5))

    def test_rejects_bad_arguments(self):
        with pytest.raises(DatasetError):
            generate_synthetic("moons", 90, 4, 3, 0.1, seed=0)
        with pytest.raises(DatasetError):
            generate_synthetic("spirals", 5, 4, 3, 0.1, seed=0)


@pytest.mark.unit
class TestCsvIngestion:
    def write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text)
        return path

    def test_standardised_with_train_statistics(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = pd.DataFrame(rng.normal(5.0, 3.0, (40, 3)), columns=["a", "b", "c"])
        frame["label"] = np.arange(40) % 2
        path = tmp_path / "pets.csv"
        frame.to_csv(path, index=False)

        dataset = load_csv_dataset(path, "label")
        assert dataset.task.num_classes == 2
        np.testing.assert_allclose(dataset.train.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(dataset.train.features.std(axis=0), 1.0, atol=1e-12)
        assert set(np.unique(dataset.train.targets)) == {0, 1}

    def test_regression_targets(self, tmp_path):
        lines = ["x,y,target"] + [f"{i},{i * 2},{i * 0.5}" for i in range(20)]
        dataset = load_csv_dataset(self.write(tmp_path, "\n".join(lines)), "target", task=TaskKind.REGRESSION)
        assert not dataset.task.is_classification
        assert dataset.train.targets.dtype == np.float64

    def test_missing_label_column(self, tmp_path):
        with pytest.raises(DatasetError, match="label column"):
            load_csv_dataset(self.write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"), "label")

    def test_non_numeric_cell_reports_its_line(self, tmp_path):
        path = self.write(tmp_path, "a,b,label\n1,2,0\n3,4,1\n5,oops,0\n7,8,1\n")
        with pytest.raises(DatasetError, match=r":4: non-numeric value 'oops'"):
            load_csv_dataset(path, "label")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_csv_dataset(tmp_path / "absent.csv", "label")

    def test_written_dataset_loads_back(self, tmp_path, tiny_dataset):
        path = write_dataset_csv(tiny_dataset, tmp_path / "tiny.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["x0", "x1", "x2", "x3", "label", "split"]
        reloaded = load_csv_dataset(path, "label")
        assert reloaded.num_features == 4
        assert sum(len(s) for s in reloaded.splits().values()) == 60


@pytest.mark.unit
class TestCheckpoints:
    def test_round_trip(self, tmp_path, small_model):
        path = save_checkpoint(small_model, tmp_path / "ckpt" / "model.mxckpt", {"regime": "mixed", "seed": 0})
        checkpoint = load_checkpoint(path)
        assert checkpoint.to_model().state_hash() == small_model.state_hash()
        assert checkpoint.config == small_model.config
        assert checkpoint.provenance == {"regime": "mixed", "seed": 0}
        assert path.read_bytes().startswith(MAGIC)

    def test_encoding_is_deterministic(self, small_model):
        assert encode_checkpoint(small_model) == encode_checkpoint(small_model.copy())

    def test_truncated(self, small_model):
        blob = encode_checkpoint(small_model)
        for cut in (10, len(blob) // 2, len(blob) - 1):
            with pytest.raises(CorruptCheckpointError):
                decode_checkpoint(blob[:cut])

    def test_bad_magic(self, small_model):
        blob = encode_checkpoint(small_model)
        with pytest.raises(CorruptCheckpointError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + blob[8:])

    def test_unknown_version(self, small_model):
        blob = encode_checkpoint(small_model)
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(blob[:6] + b"02" + blob[8:])

    def test_single_byte_corruption_is_detected(self, small_model):
        blob = encode_checkpoint(small_model)
        for position in range(len(MAGIC), len(blob), 37):
            damaged = bytearray(blob)
            damaged[position] ^= 0x40
            with pytest.raises(CorruptCheckpointError):
                decode_checkpoint(bytes(damaged))

    def test_checkpoints_from_separate_runs_can_be_matched(self, tmp_path):
        paths = [save_checkpoint(make_model(seed=s), tmp_path / f"run{s}.mxckpt") for s in (0, 1)]
        a, b = (load_checkpoint(p).to_model() for p in paths)
        result = weight_match(a, b)
        assert result.distance_after <= result.distance_before


@pytest.mark.unit
class TestReports:
    def test_budget_csv_schema(self, tmp_path):
        writer = ReportWriter(tmp_path, {"regime": {"kind": "mixed"}})
        (path,) = writer.emit(budget_report(), "budget_report", ("csv",), criterion="max_prob", seed=0)
        lines = path.read_text().splitlines()
        assert lines[0] == '# run_config: {"regime":{"kind":"mixed"}}'
        assert lines[1:3] == ["# criterion: max_prob", "# seed: 0"]
        frame = pd.read_csv(path, comment="#")
        assert list(frame.columns) == ["budget", "parameter", "val_cost", "test_cost", "test_metric"]
        assert frame["budget"].tolist() == ["25%", "50%", "75%", "100%", "unlimited"]

    def test_svg_is_byte_identical(self, tmp_path):
        config = {"seeds": [0]}
        first = emit_report(budget_report(), "svg", tmp_path / "a" / "report.svg", config, title="budgets")
        second = emit_report(budget_report(), "svg", tmp_path / "b" / "report.svg", config, title="budgets")
        assert first.read_bytes() == second.read_bytes()
        assert b"seeds" in first.read_bytes()

    def test_curve_frame_has_histogram_columns(self, small_model):
        curve = operating_curve(small_model, "patience", make_split(n=20))
        frame = to_frame(curve)
        assert list(frame.columns) == ["parameter", "mean_cost", "metric", "exits_at_1", "exits_at_2", "exits_at_3"]
        assert (frame[["exits_at_1", "exits_at_2", "exits_at_3"]].sum(axis=1) == 20).all()

    def test_empty_records_and_unknown_formats(self, tmp_path):
        writer = ReportWriter(tmp_path)
        with pytest.raises(ValueError):
            writer.emit([], "empty")
        with pytest.raises(ValueError):
            writer.emit(budget_report(), "report", ("pdf",))
        with pytest.raises(TypeError):
            to_frame(object())


@pytest.mark.unit
class TestRunConfig:
    def test_defaults_materialise(self):
        config = RunConfig()
        assert parse_run_config(config.materialized()) == config
        assert orjson.loads(config.to_json())["regime"]["kind"] == "mixed"

    def test_extra_keys_are_rejected(self):
        with pytest.raises(ConfigError):
            parse_run_config({"regime": {"kind": "joint", "momentum": 0.9}})
        with pytest.raises(ConfigError):
            parse_run_config({"bogus": 1})

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_run_config({"model": {"num_blocks": 3, "placements": [0, 2]}})
        with pytest.raises(ConfigError):
            parse_run_config({"policy": {"budgets": [1.5]}})
        with pytest.raises(ConfigError):
            parse_run_config({"dataset": {"kind": "csv"}})

    def test_overrides(self):
        config = RunConfig().with_overrides(**{"regime.max_epochs": 5, "regime.kind": "joint", "seeds": None})
        assert config.regime.max_epochs == 5
        assert config.regime.kind.value == "joint"
        assert config.seeds == [0]

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_run_config(broken)

    def test_placement_scheme_resolution(self):
        config = parse_run_config({"model": {"num_blocks": 14, "scheme": "dense-sparse"}})
        assert config.model.resolved_placements() == [1, 2, 3, 4, 5, 6, 7, 11]


@pytest.mark.unit
class TestSettings:
    def test_thread_limit_must_be_positive(self, monkeypatch):
        monkeypatch.setenv("MX_THREADS", "0")
        with pytest.raises(ConfigError):
            WorkbenchSettings()

    def test_unparseable_environment(self, monkeypatch):
        monkeypatch.setenv("MX_THREADS", "many")
        with pytest.raises(ConfigError):
            WorkbenchSettings()

    def test_log_format(self, monkeypatch):
        monkeypatch.setenv("MX_LOG_FORMAT", "xml")
        with pytest.raises(ConfigError):
            WorkbenchSettings()

    def test_worker_count_is_capped(self, monkeypatch):
        monkeypatch.setenv("MX_THREADS", "4")
        settings = WorkbenchSettings()
        assert settings.worker_count() == 4
        assert settings.worker_count(10) == 4
        assert settings.worker_count(2) == 2
        assert settings.worker_count(0) == 1

    def test_logging_config_adds_a_file_handler(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MX_LOG_FILE", str(tmp_path / "lab.log"))
        config = WorkbenchSettings().get_logging_config()
        assert set(config["handlers"]) == {"console", "file"}
        assert config["handlers"]["file"]["formatter"] == "json"

    def test_json_formatter_carries_extra_fields(self):
        record = logging.LogRecord("mx-lab", logging.INFO, __file__, 10, "epoch %d done", (3,), None)
        record.seed = 7
        entry = orjson.loads(JSONFormatter().format(record))
        assert entry["message"] == "epoch 3 done"
        assert entry["level"] == "INFO"
        assert entry["seed"] == 7
