"""
Reverse-mode automatic differentiation over dense float64 tensors
A Graph is a static, topologically ordered list of op records; leaves are bound per call
"""

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax

from src.core.errors import LabError, NonFiniteError, NonScalarRootError, ShapeMismatchError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]


class OpKind(str, Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD_BIAS = "add_bias"
    RELU = "relu"
    SOFTMAX_XENT = "softmax_xent"
    MSE = "mse"
    CONCAT = "concat"
    MEAN_BATCH = "mean_batch"
    WEIGHTED_SUM = "weighted_sum"


@dataclass(frozen=True)
class Node:
    id: int
    op: OpKind
    inputs: tuple[int, ...] = ()
    name: str | None = None

    def describe(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"node {self.id} ({self.op.value}{label})"


def as_tensor(value: object) -> Tensor:
    return np.asarray(value, dtype=np.float64)


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> float:
    """Mean cross-entropy of integer class targets under softmax(logits)"""
    labels = _class_ids(targets, logits.shape[1])
    log_p = log_softmax(logits, axis=1)
    return float(-np.mean(log_p[np.arange(logits.shape[0]), labels]))


def mean_squared_error(pred: Tensor, target: Tensor) -> float:
    diff = pred.reshape(-1) - target.reshape(-1)
    return float(np.mean(diff * diff))


def _class_ids(targets: Tensor, num_classes: int) -> npt.NDArray[np.int64]:
    labels = np.asarray(targets).reshape(-1).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatchError(f"class ids must lie in [0, {num_classes})")
    return labels


@dataclass
class Graph:
    """Op records in topological order plus the forward cache of the last call"""

    nodes: list[Node] = field(default_factory=list)
    root: int | None = None
    outputs: dict[str, int] = field(default_factory=dict)
    _leaves: dict[str, int] = field(default_factory=dict)
    _values: dict[int, Tensor] = field(default_factory=dict, repr=False)
    _aux: dict[int, Tensor] = field(default_factory=dict, repr=False)
    _order_cache: dict[int, list[int]] = field(default_factory=dict, repr=False)
    _bindings: Mapping[str, object] = field(default_factory=dict, repr=False)

    # -- construction ---------------------------------------------------

    def _add(self, op: OpKind, inputs: tuple[int, ...], name: str | None = None) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise LabError(f"input {i} does not precede new {op.value} node")
        node = Node(id=len(self.nodes), op=op, inputs=inputs, name=name)
        self.nodes.append(node)
        self._order_cache.clear()
        return node.id

    def leaf(self, name: str) -> int:
        if name in self._leaves:
            return self._leaves[name]
        node_id = self._add(OpKind.LEAF, (), name)
        self._leaves[name] = node_id
        return node_id

    def matmul(self, a: int, b: int, name: str | None = None) -> int:
        return self._add(OpKind.MATMUL, (a, b), name)

    def add_bias(self, x: int, bias: int, name: str | None = None) -> int:
        return self._add(OpKind.ADD_BIAS, (x, bias), name)

    def relu(self, x: int, name: str | None = None) -> int:
        return self._add(OpKind.RELU, (x,), name)

    def softmax_cross_entropy(self, logits: int, targets: int, name: str | None = None) -> int:
        return self._add(OpKind.SOFTMAX_XENT, (logits, targets), name)

    def mse(self, pred: int, target: int, name: str | None = None) -> int:
        return self._add(OpKind.MSE, (pred, target), name)

    def concat(self, parts: Iterable[int], name: str | None = None) -> int:
        return self._add(OpKind.CONCAT, tuple(parts), name)

    def mean_batch(self, x: int, name: str | None = None) -> int:
        return self._add(OpKind.MEAN_BATCH, (x,), name)

    def weighted_sum(self, terms: Iterable[int], weights: int, name: str | None = None) -> int:
        """Sum of scalar terms scaled by the entries of a weight vector leaf (weights last)"""
        return self._add(OpKind.WEIGHTED_SUM, (*tuple(terms), weights), name)

    def set_root(self, node_id: int) -> None:
        self.root = node_id

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    # -- evaluation -----------------------------------------------------

    def _resolve_root(self, root: int | None) -> int:
        target = self.root if root is None else root
        if target is None:
            raise LabError("graph has no root")
        return target

    def _ancestors(self, root: int) -> list[int]:
        if root not in self._order_cache:
            needed: set[int] = set()
            stack = [root]
            while stack:
                node_id = stack.pop()
                if node_id in needed:
                    continue
                needed.add(node_id)
                stack.extend(self.nodes[node_id].inputs)
            self._order_cache[root] = sorted(needed)
        return self._order_cache[root]

    def forward(self, bindings: Mapping[str, object], root: int | None = None) -> Tensor:
        target = self._resolve_root(root)
        self._values = {}
        self._aux = {}
        self._bindings = bindings
        for node_id in self._ancestors(target):
            node = self.nodes[node_id]
            if node.op is OpKind.LEAF:
                if node.name not in bindings:
                    raise LabError(f"leaf '{node.name}' is not bound")
                value = as_tensor(bindings[node.name])
            else:
                value = self._evaluate(node)
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"non-finite value at {node.describe()}")
            self._values[node_id] = value
        return self._values[target]

    def value(self, node_id: int) -> Tensor:
        try:
            return self._values[node_id]
        except KeyError:
            raise LabError(f"node {node_id} was not evaluated by the last forward pass") from None

    def output(self, name: str) -> Tensor:
        return self.value(self.outputs[name])

    def _evaluate(self, node: Node) -> Tensor:
        args = [self._values[i] for i in node.inputs]
        op = node.op
        if op is OpKind.MATMUL:
            a, b = args
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape} at {node.describe()}")
            return a @ b
        if op is OpKind.ADD_BIAS:
            x, bias = args
            if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
                raise ShapeMismatchError(f"bias {bias.shape} onto {x.shape} at {node.describe()}")
            return x + bias
        if op is OpKind.RELU:
            return np.maximum(args[0], 0.0)
        if op is OpKind.SOFTMAX_XENT:
            logits, targets = args
            if logits.ndim != 2 or targets.reshape(-1).shape[0] != logits.shape[0]:
                raise ShapeMismatchError(
                    f"logits {logits.shape} vs targets {targets.shape} at {node.describe()}"
                )
            labels = _class_ids(targets, logits.shape[1])
            log_p = log_softmax(logits, axis=1)
            self._aux[node.id] = np.exp(log_p)
            return as_tensor(-np.mean(log_p[np.arange(logits.shape[0]), labels]))
        if op is OpKind.MSE:
            pred, target = args
            if pred.shape[0] != target.shape[0] or pred.size != target.size:
                raise ShapeMismatchError(
                    f"prediction {pred.shape} vs target {target.shape} at {node.describe()}"
                )
            return as_tensor(mean_squared_error(pred, target))
        if op is OpKind.CONCAT:
            rows = {a.shape[0] for a in args}
            if any(a.ndim != 2 for a in args) or len(rows) != 1:
                raise ShapeMismatchError(f"concat of {[a.shape for a in args]} at {node.describe()}")
            return np.concatenate(args, axis=1)
        if op is OpKind.MEAN_BATCH:
            return np.mean(args[0], axis=0)
        if op is OpKind.WEIGHTED_SUM:
            *terms, weights = args
            if weights.shape != (len(terms),) or any(t.size != 1 for t in terms):
                raise ShapeMismatchError(
                    f"{len(terms)} scalar terms vs weights {weights.shape} at {node.describe()}"
                )
            total = 0.0
            for w, t in zip(weights, terms):
                total = total + w * float(t.reshape(()))
            return as_tensor(total)
        raise LabError(f"unsupported op {op}")

    # -- differentiation ------------------------------------------------

    def grad(self, wrt: Iterable[str], root: int | None = None) -> dict[str, Tensor]:
        target = self._resolve_root(root)
        if target not in self._values:
            raise LabError("forward must be run before grad")
        root_value = self._values[target]
        if root_value.size != 1:
            raise NonScalarRootError(f"root {self.nodes[target].describe()} has shape {root_value.shape}")

        order = self._ancestors(target)
        adjoints: dict[int, Tensor] = {target: np.ones_like(root_value)}
        for node_id in reversed(order):
            node = self.nodes[node_id]
            upstream = adjoints.get(node_id)
            if upstream is None or node.op is OpKind.LEAF:
                continue
            for input_id, contribution in zip(node.inputs, self._backward(node, upstream)):
                if contribution is None:
                    continue
                if input_id in adjoints:
                    adjoints[input_id] = adjoints[input_id] + contribution
                else:
                    adjoints[input_id] = contribution

        result: dict[str, Tensor] = {}
        for name in wrt:
            leaf_id = self._leaves.get(name)
            if leaf_id is not None and leaf_id in adjoints:
                result[name] = adjoints[leaf_id]
            elif name in self._bindings:
                result[name] = np.zeros_like(as_tensor(self._bindings[name]))
            else:
                raise LabError(f"cannot differentiate wrt unbound or unknown leaf '{name}'")
        return result

    def _backward(self, node: Node, g: Tensor) -> list[Tensor | None]:
        args = [self._values[i] for i in node.inputs]
        op = node.op
        if op is OpKind.MATMUL:
            a, b = args
            return [g @ b.T, a.T @ g]
        if op is OpKind.ADD_BIAS:
            return [g, g.sum(axis=0)]
        if op is OpKind.RELU:
            return [g * (args[0] > 0.0)]
        if op is OpKind.SOFTMAX_XENT:
            logits, targets = args
            n = logits.shape[0]
            d_logits = self._aux[node.id].copy()
            d_logits[np.arange(n), _class_ids(targets, logits.shape[1])] -= 1.0
            return [d_logits * (g / n), None]
        if op is OpKind.MSE:
            pred, target = args
            diff = pred.reshape(-1) - target.reshape(-1)
            d_pred = (2.0 / diff.shape[0]) * diff * g
            return [d_pred.reshape(pred.shape), (-d_pred).reshape(target.shape)]
        if op is OpKind.CONCAT:
            splits = np.cumsum([a.shape[1] for a in args])[:-1]
            return list(np.split(g, splits, axis=1))
        if op is OpKind.MEAN_BATCH:
            x = args[0]
            return [np.broadcast_to(g / x.shape[0], x.shape).copy()]
        if op is OpKind.WEIGHTED_SUM:
            *terms, weights = args
            grads: list[Tensor | None] = [as_tensor(w * g).reshape(t.shape) for w, t in zip(weights, terms)]
            grads.append(np.array([float(t.reshape(())) for t in terms]) * g)
            return grads
        raise LabError(f"unsupported op {op}")


def forward(graph: Graph, leaf_bindings: Mapping[str, object], root: int | None = None) -> Tensor:
    """Evaluate the graph up to root (default graph.root), caching intermediates"""
    return graph.forward(leaf_bindings, root)


def grad(graph: Graph, wrt: Iterable[str], root: int | None = None) -> dict[str, Tensor]:
    """d root / d leaf for every requested leaf name; zeros for leaves off the root's path"""
    return graph.grad(wrt, root)