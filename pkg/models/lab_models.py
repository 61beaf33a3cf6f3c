"""
Multi-Exit Lab Models
Validated run configuration and provenance records
"""

from pathlib import Path
from typing import Any, Literal

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.core.errors import ConfigError
from src.core.inference import DEFAULT_BUDGETS, Criterion
from src.core.multiexit import (
    BackboneSpec,
    HeadSpec,
    PlacementScheme,
    TaskKind,
    placement_scheme,
    validate_placements,
)
from src.core.regimes import RegimeKind, RegimeSpec, ScalingScheme


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class DatasetConfig(StrictModel):
    """Synthetic generator settings or a CSV source"""

    kind: Literal["spirals", "tiered-blobs", "csv"] = "tiered-blobs"
    n: int = Field(default=3000, ge=6)
    d: int = Field(default=8, ge=2)
    classes: int = Field(default=4, ge=2)
    noise: float = Field(default=0.35, ge=0.0)
    seed: int = 0
    csv_path: str | None = None
    label_column: str = "label"
    task: TaskKind = TaskKind.CLASSIFICATION
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    @field_validator("fractions")
    @classmethod
    def fractions_sum_to_one(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if min(v) < 0 or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        return v

    @model_validator(mode="after")
    def check_source(self) -> "DatasetConfig":
        if self.kind == "csv" and not self.csv_path:
            raise ValueError("csv datasets need csv_path")
        if self.kind != "csv" and self.n < 3 * self.classes:
            raise ValueError("synthetic datasets need n >= 3 * classes")
        if self.kind != "csv" and self.task is not TaskKind.CLASSIFICATION:
            raise ValueError("synthetic datasets are classification tasks")
        return self


class ModelConfigSpec(StrictModel):
    width: int = Field(default=64, ge=1)
    num_blocks: int = Field(default=6, ge=1)
    placements: list[int] | None = None
    scheme: PlacementScheme = PlacementScheme.EVERY_N
    every_n: int = Field(default=1, ge=1)
    head_depth: Literal[1, 2] = 1
    head_hidden: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_placements(self) -> "ModelConfigSpec":
        resolved = self.resolved_placements()
        validate_placements(resolved, self.num_blocks)
        HeadSpec(self.head_depth, self.head_hidden)
        return self

    def resolved_placements(self) -> list[int]:
        if self.placements is not None:
            return list(self.placements)
        return placement_scheme(self.scheme, self.num_blocks, self.every_n)

    def backbone(self, input_dim: int) -> BackboneSpec:
        return BackboneSpec(input_dim=input_dim, width=self.width, num_blocks=self.num_blocks)

    def head(self) -> HeadSpec:
        return HeadSpec(depth=self.head_depth, hidden=self.head_hidden)


class RegimeConfig(StrictModel):
    kind: RegimeKind = RegimeKind.MIXED
    scaling: ScalingScheme = ScalingScheme.UNIFORM
    patience: int = Field(default=50, ge=1)
    max_epochs: int = Field(default=200, ge=1)
    phase_max_epochs: dict[str, int] = Field(default_factory=dict)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=5e-4, gt=0.0)
    lr_min: float = Field(default=0.0, ge=0.0)
    restart_period: int = Field(default=1000, ge=1)
    restart_mult: float = Field(default=1.0, ge=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    gd_every: int = Field(default=5, ge=1)
    gd_probe_size: int = Field(default=256, ge=2)

    def to_spec(self) -> RegimeSpec:
        return RegimeSpec(
            kind=self.kind,
            scaling=self.scaling,
            patience=self.patience,
            max_epochs=self.max_epochs,
            phase_max_epochs=dict(self.phase_max_epochs),
            batch_size=self.batch_size,
            lr=self.lr,
            lr_min=self.lr_min,
            restart_period=self.restart_period,
            restart_mult=self.restart_mult,
            weight_decay=self.weight_decay,
        )


class PolicyConfig(StrictModel):
    criterion: Criterion = Criterion.MAX_PROB
    budgets: list[float | None] = Field(default_factory=lambda: list(DEFAULT_BUDGETS))

    @field_validator("budgets")
    @classmethod
    def budgets_in_range(cls, v: list[float | None]) -> list[float | None]:
        for b in v:
            if b is not None and not 0.0 < b <= 1.0:
                raise ValueError(f"budget {b} outside (0, 1]")
        return v


class RunConfig(StrictModel):
    """Everything needed to reproduce a training or sweep run"""

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfigSpec = Field(default_factory=ModelConfigSpec)
    regime: RegimeConfig = Field(default_factory=RegimeConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def check_criterion_fits_task(self) -> "RunConfig":
        if self.dataset.task is TaskKind.REGRESSION and self.policy.criterion.is_threshold:
            criterion = self.policy.criterion.value
            raise ValueError(f"criterion {criterion} needs class probabilities; use patience for regression")
        return self

    def materialized(self) -> dict[str, Any]:
        """Every field, defaults included, in JSON-compatible form"""
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return orjson.dumps(self.materialized(), option=orjson.OPT_SORT_KEYS).decode("utf-8")

    def with_overrides(self, **updates: Any) -> "RunConfig":
        data = self.materialized()
        for dotted, value in updates.items():
            if value is None:
                continue
            target = data
            *path, last = dotted.split(".")
            for key in path:
                target = target[key]
            target[last] = value
        return parse_run_config(data)


def parse_run_config(data: Any) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e
    except ValueError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = orjson.loads(Path(path).read_bytes())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_run_config(raw)


class CheckpointProvenance(StrictModel):
    """Training provenance embedded in checkpoint headers"""

    regime: RegimeKind
    scaling: ScalingScheme
    alpha: list[float]
    seed: int
    run_config: dict[str, Any]


class SweepRow(StrictModel):
    config: str
    regime: str
    scaling: str
    seed: int
    criterion: str
    budget: str
    parameter: float
    val_cost: float
    test_cost: float
    test_metric: float
