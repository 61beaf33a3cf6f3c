"""
Multi-exit model: block-structured MLP backbone with internal classifiers
Weighted multi-exit loss and the FLOP cost model behind budget percentages
"""

import copy
import hashlib
import logging
import zlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from src.core.autodiff import Graph, Tensor, as_tensor, mean_squared_error, softmax_cross_entropy
from src.core.errors import (
    InvalidPlacementError,
    LengthMismatchError,
    ShapeMismatchError,
    UnsupportedSchemeError,
)

logger = logging.getLogger(__name__)

# Irregular placements defined for a 14-block backbone
DENSE_SPARSE_14 = (1, 2, 3, 4, 5, 6, 7, 11)
SPARSE_DENSE_14 = (1, 4, 8, 9, 10, 11, 12, 13, 14)


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class PlacementScheme(str, Enum):
    EVERY_N = "every-n"
    DENSE_SPARSE = "dense-sparse"
    SPARSE_DENSE = "sparse-dense"


@dataclass(frozen=True)
class Task:
    kind: TaskKind = TaskKind.CLASSIFICATION
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.kind is TaskKind.CLASSIFICATION and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.kind is TaskKind.CLASSIFICATION else 1

    @property
    def is_classification(self) -> bool:
        return self.kind is TaskKind.CLASSIFICATION


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    width: int = 64
    num_blocks: int = 6

    def __post_init__(self) -> None:
        if min(self.input_dim, self.width, self.num_blocks) < 1:
            raise ValueError("backbone dimensions must be positive")

    def block_input(self, block: int) -> int:
        return self.input_dim if block == 1 else self.width


@dataclass(frozen=True)
class HeadSpec:
    depth: int = 1
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.depth not in (1, 2):
            raise ValueError("head depth must be 1 or 2")
        if self.depth == 2 and self.hidden <= 0:
            raise ValueError("two-layer heads need a positive hidden width")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec
    placements: tuple[int, ...]
    head: HeadSpec = field(default_factory=HeadSpec)
    task: Task = field(default_factory=Task)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["placements"] = list(self.placements)
        data["task"]["kind"] = self.task.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        task = dict(data["task"])
        return cls(
            backbone=BackboneSpec(**data["backbone"]),
            placements=tuple(int(p) for p in data["placements"]),
            head=HeadSpec(**data["head"]),
            task=Task(kind=TaskKind(task["kind"]), num_classes=int(task["num_classes"])),
        )


@dataclass
class ExitWeights:
    alpha: Tensor

    def __post_init__(self) -> None:
        self.alpha = as_tensor(self.alpha).reshape(-1)
        if np.any(self.alpha < 0) or not np.any(self.alpha > 0):
            raise ValueError("exit weights must be non-negative with at least one positive entry")

    def __len__(self) -> int:
        return int(self.alpha.shape[0])

    @classmethod
    def uniform(cls, k: int) -> "ExitWeights":
        return cls(np.ones(k))

    @classmethod
    def one_hot(cls, k: int, index: int) -> "ExitWeights":
        """One-hot on the 1-based exit index"""
        alpha = np.zeros(k)
        alpha[index - 1] = 1.0
        return cls(alpha)


def dense_flops(fan_in: int, fan_out: int) -> int:
    """Multiply-add count of a dense layer; activations are free"""
    return 2 * fan_in * fan_out + fan_out


@dataclass(frozen=True)
class CostModel:
    block_flops: tuple[int, ...]
    head_flops: tuple[int, ...]
    placements: tuple[int, ...]

    def __post_init__(self) -> None:
        if min(self.block_flops + self.head_flops) <= 0:
            raise ValueError("FLOP counts must be positive")
        if len(self.head_flops) != len(self.placements):
            raise LengthMismatchError("one head cost per placement is required")

    @property
    def num_exits(self) -> int:
        return len(self.placements)

    @property
    def backbone_cost(self) -> int:
        """Cost of the anytime pass that reaches and evaluates the final head"""
        return exit_cost(self, self.num_exits)

    @property
    def plain_backbone_cost(self) -> int:
        return sum(self.block_flops) + self.head_flops[-1]

    def relative_costs(self) -> Tensor:
        return np.array([exit_cost(self, k) for k in range(1, self.num_exits + 1)]) / self.backbone_cost


def exit_cost(cost: CostModel, k: int) -> int:
    """FLOPs spent by a sample leaving at exit k, charging every IC evaluated on the way"""
    if not 1 <= k <= cost.num_exits:
        raise ValueError(f"exit index {k} outside 1..{cost.num_exits}")
    return sum(cost.block_flops[: cost.placements[k - 1]]) + sum(cost.head_flops[:k])


def validate_placements(placements: Sequence[int], num_blocks: int) -> tuple[int, ...]:
    result = tuple(int(p) for p in placements)
    if not result:
        raise InvalidPlacementError("at least one exit is required")
    if any(p < 1 or p > num_blocks for p in result):
        raise InvalidPlacementError(f"placements {list(result)} must lie in [1, {num_blocks}]")
    if any(b <= a for a, b in zip(result, result[1:])):
        raise InvalidPlacementError(f"placements {list(result)} must be strictly increasing")
    return result


def placement_scheme(scheme: PlacementScheme | str, num_blocks: int, n: int = 1) -> list[int]:
    scheme = PlacementScheme(scheme)
    if scheme is PlacementScheme.EVERY_N:
        if not 1 <= n <= num_blocks:
            raise UnsupportedSchemeError(f"every-{n} needs 1 <= n <= {num_blocks}")
        return sorted(set(range(n, num_blocks + 1, n)) | {num_blocks})
    if num_blocks != 14:
        raise UnsupportedSchemeError(f"{scheme.value} is defined for 14 blocks, got {num_blocks}")
    if scheme is PlacementScheme.DENSE_SPARSE:
        return list(DENSE_SPARSE_14)
    return list(SPARSE_DENSE_14)


def head_prefix(placement: int) -> str:
    return f"head{placement}"


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter layout: backbone blocks first, then heads in exit order"""
    width = config.backbone.width
    shapes: dict[str, tuple[int, ...]] = {}
    for block in range(1, config.backbone.num_blocks + 1):
        shapes[f"block{block}.weight"] = (config.backbone.block_input(block), width)
        shapes[f"block{block}.bias"] = (width,)
    out = config.task.output_dim
    for p in config.placements:
        prefix = head_prefix(p)
        if config.head.depth == 1:
            shapes[f"{prefix}.fc1.weight"] = (width, out)
            shapes[f"{prefix}.fc1.bias"] = (out,)
        else:
            shapes[f"{prefix}.fc1.weight"] = (width, config.head.hidden)
            shapes[f"{prefix}.fc1.bias"] = (config.head.hidden,)
            shapes[f"{prefix}.fc2.weight"] = (config.head.hidden, out)
            shapes[f"{prefix}.fc2.bias"] = (out,)
    return shapes


def parameter_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based stream keyed by (seed, parameter name)"""
    key = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))


def init_parameters(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            params[name] = parameter_rng(seed, name).uniform(-bound, bound, size=shape)
    return params


@dataclass
class ExitOutputs:
    logits: list[Tensor]
    activations: list[Tensor] | None = None


@dataclass
class LossBreakdown:
    total: float
    per_exit: list[float]


class MultiExitModel:
    """Backbone parameters theta_b plus one IC head per placement"""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed
        expected = parameter_shapes(config)
        if set(expected) != set(params):
            raise ShapeMismatchError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeMismatchError(f"'{name}' has shape {params[name].shape}, expected {shape}")
        self._graph: Graph | None = None

    # -- structure ------------------------------------------------------

    @property
    def placements(self) -> tuple[int, ...]:
        return self.config.placements

    @property
    def num_exits(self) -> int:
        return len(self.config.placements)

    @property
    def num_blocks(self) -> int:
        return self.config.backbone.num_blocks

    @property
    def task(self) -> Task:
        return self.config.task

    def block_names(self, block: int) -> list[str]:
        return [f"block{block}.weight", f"block{block}.bias"]

    @property
    def backbone_names(self) -> list[str]:
        return [n for b in range(1, self.num_blocks + 1) for n in self.block_names(b)]

    def head_names(self, k: int) -> list[str]:
        """Parameter names of the head at 1-based exit k"""
        prefix = head_prefix(self.placements[k - 1]) + "."
        return [n for n in self.params if n.startswith(prefix)]

    @property
    def all_head_names(self) -> list[str]:
        return [n for k in range(1, self.num_exits + 1) for n in self.head_names(k)]

    @property
    def parameter_names(self) -> list[str]:
        return list(parameter_shapes(self.config))

    def copy(self) -> "MultiExitModel":
        return MultiExitModel(self.config, copy.deepcopy(self.params), self.seed)

    def with_params(self, params: Mapping[str, Tensor]) -> "MultiExitModel":
        return MultiExitModel(self.config, {n: np.array(params[n]) for n in self.parameter_names}, self.seed)

    def state_hash(self, names: Iterable[str] | None = None) -> str:
        digest = hashlib.sha256()
        for name in names if names is not None else self.parameter_names:
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def cost_model(self) -> CostModel:
        spec = self.config.backbone
        blocks = tuple(dense_flops(spec.block_input(b), spec.width) for b in range(1, spec.num_blocks + 1))
        out = self.task.output_dim
        if self.config.head.depth == 1:
            per_head = dense_flops(spec.width, out)
        else:
            per_head = dense_flops(spec.width, self.config.head.hidden) + dense_flops(self.config.head.hidden, out)
        return CostModel(blocks, (per_head,) * self.num_exits, self.placements)

    # -- graph ----------------------------------------------------------

    @property
    def graph(self) -> Graph:
        if self._graph is None:
            self._graph = self._build_graph()
        return self._graph

    def _build_graph(self) -> Graph:
        g = Graph()
        x = g.leaf("x")
        y = g.leaf("y")
        alpha = g.leaf("alpha")
        h = x
        activations: dict[int, int] = {}
        for block in range(1, self.num_blocks + 1):
            w, b = (g.leaf(n) for n in self.block_names(block))
            h = g.relu(g.add_bias(g.matmul(h, w), b), name=f"act{block}")
            activations[block] = h
            g.outputs[f"act{block}"] = h
        logits_nodes: list[int] = []
        loss_nodes: list[int] = []
        for k, p in enumerate(self.placements, start=1):
            prefix = head_prefix(p)
            z = g.add_bias(g.matmul(activations[p], g.leaf(f"{prefix}.fc1.weight")), g.leaf(f"{prefix}.fc1.bias"))
            if self.config.head.depth == 2:
                z = g.relu(z)
                z = g.add_bias(g.matmul(z, g.leaf(f"{prefix}.fc2.weight")), g.leaf(f"{prefix}.fc2.bias"))
            logits_nodes.append(z)
            g.outputs[f"logits{k}"] = z
            if self.task.is_classification:
                loss = g.softmax_cross_entropy(z, y, name=f"loss{k}")
            else:
                loss = g.mse(z, y, name=f"loss{k}")
            loss_nodes.append(loss)
            g.outputs[f"loss{k}"] = loss
        g.outputs["all_logits"] = g.concat(logits_nodes, name="all_logits")
        total = g.weighted_sum(loss_nodes, alpha, name="total")
        g.outputs["total"] = total
        g.set_root(total)
        return g

    def bindings(self, features: Tensor, targets: Tensor | None = None, alpha: Tensor | None = None) -> dict[str, Any]:
        bound: dict[str, Any] = dict(self.params)
        bound["x"] = features
        if targets is not None:
            bound["y"] = targets
        bound["alpha"] = np.ones(self.num_exits) if alpha is None else alpha
        return bound

    def loss_breakdown(self, features: Tensor, targets: Tensor, alpha: ExitWeights | None = None) -> LossBreakdown:
        weights = (alpha or ExitWeights.uniform(self.num_exits)).alpha
        if weights.shape[0] != self.num_exits:
            raise LengthMismatchError(f"{weights.shape[0]} weights for {self.num_exits} exits")
        g = self.graph
        total = g.forward(self.bindings(features, targets, weights))
        per_exit = [float(g.output(f"loss{k}")) for k in range(1, self.num_exits + 1)]
        return LossBreakdown(total=float(total), per_exit=per_exit)


def build_model(
    backbone: BackboneSpec,
    placements: Sequence[int],
    head: HeadSpec,
    task: Task,
    seed: int,
) -> MultiExitModel:
    config = ModelConfig(backbone, validate_placements(placements, backbone.num_blocks), head, task)
    logger.debug(f"building model: {backbone.num_blocks} blocks, exits at {list(config.placements)}")
    return MultiExitModel(config, init_parameters(config, seed), seed)


def forward_all(model: MultiExitModel, batch: Tensor, capture_activations: bool = False) -> ExitOutputs:
    """Logits of every exit for a batch, optionally with each block's post-ReLU activation"""
    batch = as_tensor(batch)
    if batch.ndim != 2 or batch.shape[1] != model.config.backbone.input_dim:
        raise ShapeMismatchError(
            f"batch of shape {batch.shape} does not match input width {model.config.backbone.input_dim}"
        )
    g = model.graph
    g.forward(model.bindings(batch), root=g.outputs["all_logits"])
    logits = [g.output(f"logits{k}").copy() for k in range(1, model.num_exits + 1)]
    activations = None
    if capture_activations:
        activations = [g.output(f"act{b}").copy() for b in range(1, model.num_blocks + 1)]
    return ExitOutputs(logits=logits, activations=activations)


def exit_loss(logits: Tensor, targets: Tensor, task: Task) -> float:
    if task.is_classification:
        return softmax_cross_entropy(logits, targets)
    return mean_squared_error(logits, targets)


def multi_exit_loss(
    logits: Sequence[Tensor],
    targets: Tensor,
    alpha: ExitWeights,
    task: Task | None = None,
) -> LossBreakdown:
    """Weighted objective sum_k alpha_k L^(k) with cross-entropy or MSE per exit"""
    task = task or Task()
    if len(alpha) != len(logits):
        raise LengthMismatchError(f"{len(alpha)} weights for {len(logits)} exits")
    per_exit = [exit_loss(z, targets, task) for z in logits]
    total = 0.0
    for w, loss in zip(alpha.alpha, per_exit):
        total = total + w * loss
    return LossBreakdown(total=float(total), per_exit=per_exit)


@dataclass
class ExitEvaluation:
    metrics: list[float]
    losses: list[float]
    higher_is_better: bool


def evaluate_exits(model: MultiExitModel, features: Tensor, targets: Tensor) -> ExitEvaluation:
    """Per-exit accuracy (classification) or MSE (regression) and per-exit loss"""
    outputs = forward_all(model, features)
    losses = [exit_loss(z, targets, model.task) for z in outputs.logits]
    if model.task.is_classification:
        labels = np.asarray(targets).astype(np.int64)
        metrics = [float(np.mean(np.argmax(z, axis=1) == labels)) for z in outputs.logits]
        return ExitEvaluation(metrics=metrics, losses=losses, higher_is_better=True)
    return ExitEvaluation(metrics=list(losses), losses=losses, higher_is_better=False)
