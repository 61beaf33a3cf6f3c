"""
Training regimes for multi-exit models
Phase machinery for the backbone-only, joint and IC-only objectives, early stopping, loss scaling and gradient equilibrium
"""

import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from src.core.autodiff import Tensor
from src.core.datasets import Dataset
from src.core.errors import DivergenceError, LengthMismatchError, NonFiniteError, ShapeMismatchError
from src.core.multiexit import CostModel, ExitWeights, MultiExitModel, evaluate_exits, exit_cost
from src.core.optim import AdamWState, LrSchedule, adamw_step, lr_at

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


class RegimeKind(str, Enum):
    DISJOINT = "disjoint"
    JOINT = "joint"
    MIXED = "mixed"
    BRANCH_WISE = "branch-wise"
    SEPARATE = "separate"
    ALTERNATING = "alternating"
    MIXED_GRADUAL = "mixed-gradual"


class ScalingScheme(str, Enum):
    UNIFORM = "uniform"
    INC = "inc"
    DEC = "dec"
    SDN = "sdn"
    GE = "ge"


class Objective(str, Enum):
    EQ1 = "eq1"
    EQ2 = "eq2"
    EQ3 = "eq3"
    ALTERNATING = "alternating"


class StopDecision(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class RegimeSpec:
    kind: RegimeKind = RegimeKind.MIXED
    scaling: ScalingScheme = ScalingScheme.UNIFORM
    patience: int = 50
    max_epochs: int = 200
    phase_max_epochs: dict[str, int] = field(default_factory=dict)
    batch_size: int = 64
    lr: float = 5e-4
    lr_min: float = 0.0
    restart_period: int = 1000
    restart_mult: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        self.kind = RegimeKind(self.kind)
        self.scaling = ScalingScheme(self.scaling)
        if self.patience < 1:
            raise ValueError("early-stop patience must be at least 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if any(v < 1 for v in self.phase_max_epochs.values()):
            raise ValueError("phase epoch budgets must be positive")

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            eta_max=self.lr, eta_min=self.lr_min, t_0=self.restart_period, t_mult=self.restart_mult
        )

    def epochs_for(self, phase_id: str) -> int:
        return self.phase_max_epochs.get(phase_id, self.max_epochs)


@dataclass
class EarlyStopState:
    """Best score per monitored exit and epochs since any of them improved"""

    patience: int
    higher_is_better: bool = True
    best: list[float | None] = field(default_factory=list)
    counter: int = 0

    @classmethod
    def create(cls, num_exits: int, patience: int, higher_is_better: bool = True) -> "EarlyStopState":
        return cls(patience=patience, higher_is_better=higher_is_better, best=[None] * num_exits)


def early_stop_update(state: EarlyStopState, metrics: Sequence[float]) -> StopDecision:
    """Reset on any single exit improving; stop once no exit improved for `patience` epochs"""
    if len(metrics) != len(state.best):
        raise LengthMismatchError(f"{len(metrics)} metrics for {len(state.best)} monitored exits")
    improved = False
    for i, value in enumerate(metrics):
        best = state.best[i]
        better = best is None or (value > best if state.higher_is_better else value < best)
        if better:
            state.best[i] = float(value)
            improved = True
    state.counter = 0 if improved else state.counter + 1
    return StopDecision.STOP if state.counter >= state.patience else StopDecision.CONTINUE


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_metrics: list[float]
    wall_clock: float


@dataclass
class TrainLog:
    num_exits: int
    records: list[EpochRecord] = field(default_factory=list)
    phase_epochs: dict[str, int] = field(default_factory=dict)
    objective_steps: dict[str, int] = field(default_factory=dict)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    @property
    def phases(self) -> list[str]:
        return list(self.phase_epochs)

    def append(self, record: EpochRecord) -> None:
        if record.epoch <= self.last_epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self.last_epoch}")
        if len(record.val_metrics) != self.num_exits:
            raise LengthMismatchError("one validation metric per exit is required")
        self.records.append(record)
        self.phase_epochs[record.phase] = self.phase_epochs.get(record.phase, 0) + 1

    def count_step(self, objective: str) -> None:
        self.objective_steps[objective] = self.objective_steps.get(objective, 0) + 1

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"epoch": r.epoch, "phase": r.phase, "lr": r.lr, "train_loss": r.train_loss}
            for k, value in enumerate(r.val_metrics, start=1):
                row[f"val_metric_exit_{k}"] = value
            rows.append(row)
        columns = ["epoch", "phase", "lr", "train_loss"] + [f"val_metric_exit_{k}" for k in range(1, self.num_exits + 1)]
        return pd.DataFrame(rows, columns=columns)


@dataclass
class EpochContext:
    phase: str
    epoch: int
    model: MultiExitModel


EpochCallback = Callable[[EpochContext], None]


def loss_weights(scheme: ScalingScheme | str, k: int, cost: CostModel | None = None) -> ExitWeights:
    """Per-exit loss weights normalised to sum to the number of exits"""
    scheme = ScalingScheme(scheme)
    if k < 1:
        raise ValueError("at least one exit is required")
    if scheme in (ScalingScheme.UNIFORM, ScalingScheme.GE):
        raw = np.ones(k)
    elif scheme is ScalingScheme.INC:
        raw = np.arange(1, k + 1, dtype=np.float64)
    elif scheme is ScalingScheme.DEC:
        raw = np.arange(k, 0, -1, dtype=np.float64)
    else:
        if cost is None or cost.num_exits != k:
            raise LengthMismatchError("sdn scaling needs a cost model with one entry per exit")
        raw = np.array([exit_cost(cost, i) for i in range(1, k + 1)], dtype=np.float64) / cost.backbone_cost
    return ExitWeights(raw * (k / raw.sum()))


def ge_combine(
    per_exit_grads: Sequence[Mapping[str, Tensor]],
    model: MultiExitModel,
    active: Sequence[int] | None = None,
) -> dict[str, Tensor]:
    """Backbone gradient where each block averages the gradients of the exits it feeds"""
    exits = list(active) if active is not None else list(range(1, model.num_exits + 1))
    if len(per_exit_grads) != len(exits):
        raise LengthMismatchError(f"{len(per_exit_grads)} gradients for {len(exits)} exits")
    combined: dict[str, Tensor] = {}
    for block in range(1, model.num_blocks + 1):
        feeding = [i for i, k in enumerate(exits) if model.placements[k - 1] >= block]
        for name in model.block_names(block):
            shape = model.params[name].shape
            for g in per_exit_grads:
                if name not in g or g[name].shape != shape:
                    raise ShapeMismatchError(f"gradient for '{name}' does not match the backbone layout")
            total = np.zeros(shape)
            for i in feeding:
                total = total + per_exit_grads[i][name] / len(feeding)
            combined[name] = total
    return combined


@dataclass
class PhasePlan:
    phase_id: str
    objective: Objective
    alpha: ExitWeights
    trainable: list[str]
    monitored: list[int]
    gradient_equilibrium: bool = False

    @property
    def active_exits(self) -> list[int]:
        return [k for k, w in enumerate(self.alpha.alpha, start=1) if w > 0]


def _final_exit_plan(model: MultiExitModel, phase_id: str = "phase1") -> PhasePlan:
    k = model.num_exits
    return PhasePlan(
        phase_id=phase_id,
        objective=Objective.EQ1,
        alpha=ExitWeights.one_hot(k, k),
        trainable=model.backbone_names + model.head_names(k),
        monitored=[k],
    )


def _resolve_alpha(spec: RegimeSpec, model: MultiExitModel, alpha: ExitWeights | None) -> ExitWeights:
    if alpha is None:
        alpha = loss_weights(spec.scaling, model.num_exits, model.cost_model())
    if len(alpha) != model.num_exits:
        raise LengthMismatchError(f"{len(alpha)} loss weights for {model.num_exits} exits")
    return alpha


def _masked(alpha: ExitWeights, keep: Sequence[int]) -> ExitWeights:
    weights = np.zeros(len(alpha))
    for k in keep:
        weights[k - 1] = alpha.alpha[k - 1]
    return ExitWeights(weights)


class PhaseRunner:
    """Mini-batch AdamW loop for one phase with per-exit early stopping"""

    def __init__(
        self,
        model: MultiExitModel,
        data: Dataset,
        spec: RegimeSpec,
        log: TrainLog,
        seed: int,
        callbacks: Sequence[EpochCallback] = (),
    ):
        self.model = model
        self.data = data
        self.spec = spec
        self.log = log
        self.seed = seed
        self.callbacks = list(callbacks)

    def _batch_order(self, ordinal: int, epoch: int) -> np.ndarray:
        key = np.random.SeedSequence([self.seed, ordinal, epoch])
        return np.random.Generator(np.random.Philox(key)).permutation(len(self.data.train))

    def _check_loss(self, value: float, plan: PhasePlan) -> float:
        if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            raise DivergenceError(f"train loss {value} diverged in {plan.phase_id}")
        return value

    def _gradients(
        self, plan: PhasePlan, objective: Objective, x: Tensor, y: Tensor
    ) -> tuple[float, dict[str, Tensor]]:
        model = self.model
        g = model.graph
        if objective is Objective.EQ1:
            trainable = _final_exit_plan(model).trainable
            root = g.outputs[f"loss{model.num_exits}"]
            loss = float(g.forward(model.bindings(x, y), root=root))
            return loss, g.grad(trainable, root=root)

        trainable = plan.trainable
        loss = float(g.forward(model.bindings(x, y, plan.alpha.alpha)))
        if not plan.gradient_equilibrium:
            return loss, g.grad(trainable)

        backbone = set(model.backbone_names)
        per_exit = []
        for k in plan.active_exits:
            grads_k = g.grad(model.backbone_names, root=g.outputs[f"loss{k}"])
            per_exit.append({n: plan.alpha.alpha[k - 1] * v for n, v in grads_k.items()})
        grads = g.grad([n for n in trainable if n not in backbone])
        grads.update({n: v for n, v in ge_combine(per_exit, model, plan.active_exits).items() if n in trainable})
        return loss, grads

    def run(self, plan: PhasePlan, ordinal: int = 0) -> MultiExitModel:
        model = self.model
        spec = self.spec
        max_epochs = spec.epochs_for(plan.phase_id)
        schedule = spec.schedule()
        optimizer = AdamWState.create(model.params, lr=spec.lr, weight_decay=spec.weight_decay)
        self.optimizer = optimizer
        stop = EarlyStopState.create(len(plan.monitored), spec.patience, model.task.is_classification)
        logger.info(
            f"phase {plan.phase_id} started: objective={plan.objective.value}, "
            f"{len(plan.trainable)} trainable tensors, monitoring exits {plan.monitored}"
        )
        started = time.perf_counter()
        train = self.data.train
        step = 0

        for epoch in range(1, max_epochs + 1):
            order = self._batch_order(ordinal, epoch)
            losses = []
            for begin in range(0, len(order), spec.batch_size):
                idx = order[begin : begin + spec.batch_size]
                objective = plan.objective
                if objective is Objective.ALTERNATING:
                    objective = Objective.EQ1 if step % 2 == 0 else Objective.EQ2
                lr = lr_at(schedule, step)
                try:
                    loss, grads = self._gradients(plan, objective, train.features[idx], train.targets[idx])
                    self._check_loss(loss, plan)
                    adamw_step(optimizer, model.params, grads, lr)
                except NonFiniteError as e:
                    logger.error(f"phase {plan.phase_id} diverged at step {step}: {e}")
                    raise DivergenceError(f"non-finite values in {plan.phase_id}: {e}") from e
                except DivergenceError as e:
                    logger.error(f"phase {plan.phase_id} aborted at step {step}: {e}")
                    raise
                self.log.count_step(objective.value)
                losses.append(loss)
                step += 1

            evaluation = evaluate_exits(model, self.data.val.features, self.data.val.targets)
            self.log.append(
                EpochRecord(
                    epoch=self.log.last_epoch + 1,
                    phase=plan.phase_id,
                    lr=lr_at(schedule, max(step - 1, 0)),
                    train_loss=float(np.mean(losses)),
                    val_metrics=evaluation.metrics,
                    wall_clock=time.perf_counter() - started,
                )
            )
            logger.debug(f"{plan.phase_id} epoch {epoch}: loss={np.mean(losses):.6f} val={evaluation.metrics}")
            for callback in self.callbacks:
                callback(EpochContext(phase=plan.phase_id, epoch=self.log.last_epoch, model=model))

            monitored = [evaluation.metrics[k - 1] for k in plan.monitored]
            if early_stop_update(stop, monitored) is StopDecision.STOP:
                logger.info(f"phase {plan.phase_id} early-stopped after {epoch} epochs")
                break
        else:
            logger.info(f"phase {plan.phase_id} reached its {max_epochs}-epoch budget")
        return model


def run_phase1(
    model: MultiExitModel,
    data: Dataset,
    spec: RegimeSpec,
    *,
    seed: int | None = None,
    log: TrainLog | None = None,
    ordinal: int = 0,
    callbacks: Sequence[EpochCallback] = (),
) -> MultiExitModel:
    """Backbone plus final head on the final-exit loss; other heads untouched"""
    runner = PhaseRunner(model, data, spec, log or TrainLog(model.num_exits), _seed(model, seed), callbacks)
    return runner.run(_final_exit_plan(model), ordinal)


def run_phase2(
    model: MultiExitModel,
    data: Dataset,
    spec: RegimeSpec,
    alpha: ExitWeights | None = None,
    *,
    detach_ics: bool = False,
    seed: int | None = None,
    log: TrainLog | None = None,
    ordinal: int = 0,
    callbacks: Sequence[EpochCallback] = (),
    phase_id: str = "phase2",
) -> MultiExitModel:
    """Joint objective over every exit. detach_ics excludes heads with zero weight from the trainable set"""
    alpha = _resolve_alpha(spec, model, alpha)
    trainable = list(model.backbone_names)
    for k in range(1, model.num_exits + 1):
        if not detach_ics or alpha.alpha[k - 1] > 0:
            trainable += model.head_names(k)
    plan = PhasePlan(
        phase_id=phase_id,
        objective=Objective.EQ2,
        alpha=alpha,
        trainable=trainable,
        monitored=[k for k in range(1, model.num_exits + 1) if alpha.alpha[k - 1] > 0],
        gradient_equilibrium=spec.scaling is ScalingScheme.GE,
    )
    runner = PhaseRunner(model, data, spec, log or TrainLog(model.num_exits), _seed(model, seed), callbacks)
    return runner.run(plan, ordinal)


def run_phase3(
    model: MultiExitModel,
    data: Dataset,
    spec: RegimeSpec,
    alpha: ExitWeights | None = None,
    *,
    seed: int | None = None,
    log: TrainLog | None = None,
    ordinal: int = 0,
    callbacks: Sequence[EpochCallback] = (),
) -> MultiExitModel:
    """Heads only under the weighted multi-exit loss; backbone frozen"""
    alpha = _resolve_alpha(spec, model, alpha)
    plan = PhasePlan(
        phase_id="phase3",
        objective=Objective.EQ3,
        alpha=alpha,
        trainable=model.all_head_names,
        monitored=[k for k in range(1, model.num_exits + 1) if alpha.alpha[k - 1] > 0],
    )
    runner = PhaseRunner(model, data, spec, log or TrainLog(model.num_exits), _seed(model, seed), callbacks)
    return runner.run(plan, ordinal)


def _seed(model: MultiExitModel, seed: int | None) -> int:
    return model.seed if seed is None else seed


def regime_phases(spec: RegimeSpec, model: MultiExitModel) -> list[PhasePlan]:
    """Ordered phase plans for a regime"""
    k = model.num_exits
    alpha = _resolve_alpha(spec, model, None)
    ge = spec.scaling is ScalingScheme.GE
    every_exit = list(range(1, k + 1))

    def joint(phase_id: str, keep: Sequence[int], trainable: list[str], objective: Objective = Objective.EQ2) -> PhasePlan:
        return PhasePlan(
            phase_id=phase_id,
            objective=objective,
            alpha=_masked(alpha, keep),
            trainable=trainable,
            monitored=list(keep),
            gradient_equilibrium=ge and objective is not Objective.EQ3,
        )

    everything = model.parameter_names
    kind = spec.kind
    if kind is RegimeKind.DISJOINT:
        return [_final_exit_plan(model), joint("phase3", every_exit, model.all_head_names, Objective.EQ3)]
    if kind is RegimeKind.JOINT:
        return [joint("phase2", every_exit, everything)]
    if kind is RegimeKind.MIXED:
        return [_final_exit_plan(model), joint("phase2", every_exit, everything)]
    if kind is RegimeKind.ALTERNATING:
        return [joint("alternating", every_exit, everything, Objective.ALTERNATING)]
    if kind is RegimeKind.BRANCH_WISE:
        plans = []
        previous = 0
        for exit_k, placement in enumerate(model.placements, start=1):
            blocks = range(previous + 1, placement + 1)
            trainable = [n for b in blocks for n in model.block_names(b)] + model.head_names(exit_k)
            plans.append(
                PhasePlan(
                    phase_id=f"branch{exit_k}",
                    objective=Objective.EQ2,
                    alpha=ExitWeights.one_hot(k, exit_k),
                    trainable=trainable,
                    monitored=[exit_k],
                )
            )
            previous = placement
        return plans
    if kind is RegimeKind.SEPARATE:
        return [
            joint(
                f"separate{i}",
                range(1, i + 1),
                model.backbone_names + [n for j in range(1, i + 1) for n in model.head_names(j)],
            )
            for i in range(1, k + 1)
        ]
    # mixed-gradual
    if k == 1:
        return [_final_exit_plan(model), joint("phase2", every_exit, everything)]
    return [_final_exit_plan(model)] + [joint(f"gradual{i}", range(k - i + 1, k + 1), everything) for i in range(2, k + 1)]


@dataclass
class RegimeResult:
    model: MultiExitModel
    log: TrainLog
    alpha: ExitWeights


def run_regime(
    spec: RegimeSpec,
    model: MultiExitModel,
    data: Dataset,
    *,
    seed: int | None = None,
    callbacks: Sequence[EpochCallback] = (),
) -> RegimeResult:
    """Train `model` in place through every phase of the regime"""
    log = TrainLog(model.num_exits)
    runner = PhaseRunner(model, data, spec, log, _seed(model, seed), callbacks)
    plans = regime_phases(spec, model)
    logger.info(f"regime {spec.kind.value} ({spec.scaling.value}): {[p.phase_id for p in plans]}")
    for ordinal, plan in enumerate(plans):
        try:
            runner.run(plan, ordinal)
        except Exception as e:
            logger.error(f"regime {spec.kind.value} failed in {plan.phase_id}: {e}")
            raise
    return RegimeResult(model=model, log=log, alpha=_resolve_alpha(spec, model, None))
