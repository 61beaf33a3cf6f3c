"""
Confidence-based early exiting
Operating-point simulation and budget calibration on validation data
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import entr, softmax

from src.core.autodiff import Tensor
from src.core.datasets import Split
from src.core.errors import InfeasibleBudgetError, LengthMismatchError, UnsupportedCriterionError
from src.core.multiexit import CostModel, MultiExitModel, Task, TaskKind, exit_cost, forward_all

logger = logging.getLogger(__name__)

THRESHOLD_GRID = np.linspace(0.0, 1.0, 201)
DEFAULT_BUDGETS: tuple[float | None, ...] = (0.25, 0.5, 0.75, 1.0, None)
REGRESSION_AGREEMENT = 0.1


class Criterion(str, Enum):
    MAX_PROB = "max_prob"
    NORM_ENTROPY = "norm_entropy"
    PATIENCE = "patience"

    @property
    def is_threshold(self) -> bool:
        return self is not Criterion.PATIENCE


@dataclass(frozen=True)
class ExitPolicy:
    criterion: Criterion
    parameter: float
    tolerance: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        if self.criterion.is_threshold:
            if not 0.0 <= self.parameter <= 1.0:
                raise ValueError(f"threshold {self.parameter} outside [0, 1]")
        elif self.parameter < 1 or int(self.parameter) != self.parameter:
            raise ValueError(f"patience {self.parameter} must be a positive integer")

    def validate_for(self, num_exits: int, task: Task) -> None:
        if self.criterion.is_threshold and not task.is_classification:
            raise UnsupportedCriterionError(f"{self.criterion.value} needs class probabilities")
        if self.criterion is Criterion.PATIENCE and self.parameter > num_exits:
            raise ValueError(f"patience {int(self.parameter)} exceeds {num_exits} exits")


@dataclass
class OperatingPoint:
    parameter: float
    mean_cost: float
    metric: float
    histogram: list[int]

    def __post_init__(self) -> None:
        if not 0.0 < self.mean_cost <= 1.0 + 1e-12:
            raise ValueError(f"mean cost {self.mean_cost} outside (0, 1]")


@dataclass
class BudgetRow:
    budget: float | None
    parameter: float
    val_cost: float
    val_metric: float
    test_cost: float
    test_metric: float

    @property
    def label(self) -> str:
        return "unlimited" if self.budget is None else f"{round(self.budget * 100)}%"


@dataclass
class BudgetReport:
    criterion: Criterion
    higher_is_better: bool
    rows: list[BudgetRow] = field(default_factory=list)

    def row(self, budget: float | None) -> BudgetRow:
        for r in self.rows:
            if r.budget == budget:
                return r
        raise KeyError(budget)


def confidence(logits: Tensor, criterion: Criterion | str, task: Task | None = None) -> Tensor:
    """Confidence in [0, 1] per row of logits; higher means more confident"""
    criterion = Criterion(criterion)
    if criterion is Criterion.PATIENCE:
        raise UnsupportedCriterionError("patience is not a confidence score")
    if task is not None and not task.is_classification:
        raise UnsupportedCriterionError(f"{criterion.value} is undefined for regression")
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits, axis=-1)
    if criterion is Criterion.MAX_PROB:
        return probs.max(axis=-1)
    num_classes = logits.shape[-1]
    if num_classes < 2:
        raise UnsupportedCriterionError("normalised entropy needs at least two classes")
    return np.clip(1.0 - entr(probs).sum(axis=-1) / np.log(num_classes), 0.0, 1.0)


def _predictions(logits: Sequence[Tensor], task: Task) -> list[Tensor]:
    if task.is_classification:
        return [np.argmax(z, axis=-1) for z in logits]
    return [np.asarray(z).reshape(-1) for z in logits]


def _infer_task(output: Tensor) -> Task:
    width = np.asarray(output).shape[-1] if np.ndim(output) else 1
    if width < 2:
        return Task(kind=TaskKind.REGRESSION, num_classes=0)
    return Task(kind=TaskKind.CLASSIFICATION, num_classes=width)


def decide_exit(
    outputs: Sequence[Tensor],
    policy: ExitPolicy,
    task: Task | None = None,
) -> int:
    """1-based exit for one sample, walking the per-exit outputs in order"""
    task = task or _infer_task(outputs[0])
    policy.validate_for(len(outputs), task)
    k = len(outputs)
    if policy.criterion.is_threshold:
        for i, z in enumerate(outputs, start=1):
            if float(confidence(z, policy.criterion, task)) >= policy.parameter:
                return i
        return k
    window = int(policy.parameter)
    run = 0
    previous = None
    for i, z in enumerate(outputs, start=1):
        current = np.argmax(z) if task.is_classification else float(np.asarray(z).reshape(()))
        if previous is not None and _agrees(previous, current, task, policy.tolerance):
            run += 1
        else:
            run = 1
        if run >= window:
            return i
        previous = current
    return k


def _agrees(a: object, b: object, task: Task, tolerance: float) -> bool:
    if task.is_classification:
        return bool(a == b)
    return abs(float(a) - float(b)) <= tolerance


def decide_exits(logits: Sequence[Tensor], policy: ExitPolicy, task: Task) -> np.ndarray:
    """Vectorised decide_exit over every row of a split"""
    k = len(logits)
    n = np.asarray(logits[0]).shape[0]
    chosen = np.full(n, k, dtype=np.int64)
    undecided = np.ones(n, dtype=bool)
    if policy.criterion.is_threshold:
        for i, z in enumerate(logits, start=1):
            hit = undecided & (confidence(z, policy.criterion, task) >= policy.parameter)
            chosen[hit] = i
            undecided &= ~hit
        return chosen
    window = int(policy.parameter)
    preds = _predictions(logits, task)
    run = np.zeros(n, dtype=np.int64)
    for i, current in enumerate(preds, start=1):
        if i == 1:
            run[:] = 1
        else:
            previous = preds[i - 2]
            if task.is_classification:
                agree = current == previous
            else:
                agree = np.abs(current - previous) <= policy.tolerance
            run = np.where(agree, run + 1, 1)
        hit = undecided & (run >= window)
        chosen[hit] = i
        undecided &= ~hit
    return chosen


@dataclass
class ExitTable:
    """Per-exit outputs of a split, computed once and reused across policy parameters"""

    logits: list[Tensor]
    targets: Tensor
    task: Task
    costs: Tensor

    @classmethod
    def build(cls, model: MultiExitModel, split: Split, cost: CostModel | None = None) -> "ExitTable":
        if len(split) == 0:
            raise ValueError("operating points need a non-empty split")
        cost = cost or model.cost_model()
        if cost.num_exits != model.num_exits:
            raise LengthMismatchError("cost model and model disagree on the number of exits")
        outputs = forward_all(model, split.features)
        costs = np.array([exit_cost(cost, k) for k in range(1, cost.num_exits + 1)], dtype=np.float64)
        return cls(logits=outputs.logits, targets=split.targets, task=model.task, costs=costs / cost.backbone_cost)

    @property
    def num_exits(self) -> int:
        return len(self.logits)

    def evaluate(self, policy: ExitPolicy) -> OperatingPoint:
        policy.validate_for(self.num_exits, self.task)
        chosen = decide_exits(self.logits, policy, self.task)
        rows = np.arange(chosen.shape[0])
        stacked = np.stack(self.logits)
        picked = stacked[chosen - 1, rows]
        if self.task.is_classification:
            metric = float(np.mean(np.argmax(picked, axis=-1) == self.targets.astype(np.int64)))
        else:
            diff = picked.reshape(-1) - self.targets.reshape(-1)
            metric = float(np.mean(diff * diff))
        histogram = np.bincount(chosen - 1, minlength=self.num_exits)
        return OperatingPoint(
            parameter=policy.parameter,
            mean_cost=float(np.mean(self.costs[chosen - 1])),
            metric=metric,
            histogram=[int(c) for c in histogram],
        )


def _policy_tolerance(task: Task, split: Split) -> float:
    if task.is_classification:
        return 0.0
    return REGRESSION_AGREEMENT * float(np.std(split.targets))


def evaluate_operating_point(
    model: MultiExitModel,
    policy: ExitPolicy,
    split: Split,
    cost: CostModel | None = None,
) -> OperatingPoint:
    return ExitTable.build(model, split, cost).evaluate(policy)


def parameter_grid(criterion: Criterion, num_exits: int) -> list[float]:
    if criterion.is_threshold:
        return [float(t) for t in THRESHOLD_GRID]
    return [float(t) for t in range(1, num_exits + 1)]


def operating_curve(
    model: MultiExitModel,
    criterion: Criterion | str,
    split: Split,
    cost: CostModel | None = None,
) -> list[OperatingPoint]:
    """Every operating point on the criterion's parameter grid"""
    criterion = Criterion(criterion)
    table = ExitTable.build(model, split, cost)
    tolerance = _policy_tolerance(model.task, split)
    return [
        table.evaluate(ExitPolicy(criterion, parameter, tolerance))
        for parameter in parameter_grid(criterion, model.num_exits)
    ]


def select_point(
    points: Sequence[OperatingPoint],
    budget: float | None,
    higher_is_better: bool = True,
) -> OperatingPoint:
    """Best metric within budget; ties go to lower cost, then the smaller parameter"""
    feasible = [p for p in points if budget is None or p.mean_cost <= budget]
    if not feasible:
        floor = min(p.mean_cost for p in points)
        raise InfeasibleBudgetError(f"budget {budget} is below the cheapest operating point ({floor:.4f})")
    sign = -1.0 if higher_is_better else 1.0
    return min(feasible, key=lambda p: (sign * p.metric, p.mean_cost, p.parameter))


def calibrate_budgets(
    model: MultiExitModel,
    criterion: Criterion | str,
    val: Split,
    test: Split,
    budgets: Sequence[float | None] = DEFAULT_BUDGETS,
    cost: CostModel | None = None,
) -> BudgetReport:
    """Pick the policy parameter per budget on validation data, then report it on test data"""
    criterion = Criterion(criterion)
    for budget in budgets:
        if budget is not None and not 0.0 < budget <= 1.0:
            raise ValueError(f"budget {budget} outside (0, 1]")
    higher_is_better = model.task.is_classification
    val_points = operating_curve(model, criterion, val, cost)
    test_table = ExitTable.build(model, test, cost)
    tolerance = _policy_tolerance(model.task, val)

    report = BudgetReport(criterion=criterion, higher_is_better=higher_is_better)
    for budget in budgets:
        chosen = select_point(val_points, budget, higher_is_better)
        tested = test_table.evaluate(ExitPolicy(criterion, chosen.parameter, tolerance))
        report.rows.append(
            BudgetRow(
                budget=budget,
                parameter=chosen.parameter,
                val_cost=chosen.mean_cost,
                val_metric=chosen.metric,
                test_cost=tested.mean_cost,
                test_metric=tested.metric,
            )
        )
        logger.info(
            f"budget {report.rows[-1].label}: {criterion.value}={chosen.parameter:g} "
            f"val_cost={chosen.mean_cost:.4f} test_metric={tested.metric:.4f}"
        )
    return report
