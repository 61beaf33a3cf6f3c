"""
Hidden-unit permutations and weight matching
Exact linear assignment (Hungarian method with row/column potentials) and coordinate-descent alignment of two models
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from src.core.autodiff import Tensor
from src.core.errors import ArchitectureMismatchError, NonFiniteError, ShapeMismatchError
from src.core.multiexit import MultiExitModel, head_prefix

logger = logging.getLogger(__name__)

MAX_SWEEPS = 50


def hungarian(cost: Tensor) -> np.ndarray:
    """Minimum-cost perfect matching; result[i] is the column assigned to row i"""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeMismatchError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NonFiniteError("cost matrix contains non-finite entries")
    n = c.shape[0]

    # 1-based columns; column 0 is the virtual root of each augmenting search
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cols = np.flatnonzero(~used[1:]) + 1
            reduced = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols[better]] = reduced[better]
            way[cols[better]] = j0
            j1 = int(cols[np.argmin(minv[cols])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment


def assignment_cost(cost: Tensor, assignment: np.ndarray) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(c[np.arange(c.shape[0]), assignment].sum())


@dataclass
class Permutation:
    """Per backbone block, perm[i] is the unit of the source model placed at position i"""

    layers: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        for block, perm in self.layers.items():
            perm = np.asarray(perm, dtype=np.int64)
            if not np.array_equal(np.sort(perm), np.arange(perm.shape[0])):
                raise ValueError(f"layer {block} map is not a bijection")
            self.layers[block] = perm

    @classmethod
    def identity(cls, model: MultiExitModel) -> "Permutation":
        width = model.config.backbone.width
        return cls({b: np.arange(width) for b in range(1, model.num_blocks + 1)})

    @classmethod
    def random(cls, model: MultiExitModel, seed: int) -> "Permutation":
        rng = np.random.default_rng(seed)
        width = model.config.backbone.width
        return cls({b: rng.permutation(width) for b in range(1, model.num_blocks + 1)})

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.shape[0])) for p in self.layers.values())

    def inverse(self) -> "Permutation":
        return Permutation({b: np.argsort(p) for b, p in self.layers.items()})


def _check_same_architecture(a: MultiExitModel, b: MultiExitModel) -> None:
    if a.config != b.config:
        raise ArchitectureMismatchError("models do not share the same configuration")


def apply_permutation(model: MultiExitModel, perm: Permutation) -> MultiExitModel:
    """Re-index hidden units; the network function is unchanged"""
    params = {n: v.copy() for n, v in model.params.items()}
    heads_at = {p: head_prefix(p) for p in model.placements}
    for block in range(1, model.num_blocks + 1):
        order = perm.layers.get(block)
        if order is None:
            continue
        if order.shape[0] != model.config.backbone.width:
            raise ShapeMismatchError(f"layer {block} permutation has {order.shape[0]} entries")
        params[f"block{block}.weight"] = params[f"block{block}.weight"][:, order]
        params[f"block{block}.bias"] = params[f"block{block}.bias"][order]
        if block < model.num_blocks:
            params[f"block{block + 1}.weight"] = params[f"block{block + 1}.weight"][order, :]
        if block in heads_at:
            name = f"{heads_at[block]}.fc1.weight"
            params[name] = params[name][order, :]
    return model.with_params(params)


def parameter_distance(a: MultiExitModel, b: MultiExitModel) -> float:
    """Frobenius distance over every parameter"""
    _check_same_architecture(a, b)
    return float(np.sqrt(sum(np.sum((a.params[n] - b.params[n]) ** 2) for n in a.parameter_names)))


def _layer_similarity(
    a: Mapping[str, Tensor],
    b: Mapping[str, Tensor],
    block: int,
    perms: dict[int, np.ndarray],
    model: MultiExitModel,
) -> Tensor:
    """S[i, j]: inner product gained by placing unit j of B at position i of A"""
    w_a = a[f"block{block}.weight"]
    w_b = b[f"block{block}.weight"]
    if block > 1:
        w_b = w_b[perms[block - 1], :]
    sim = w_a.T @ w_b
    sim = sim + np.outer(a[f"block{block}.bias"], b[f"block{block}.bias"])
    if block < model.num_blocks:
        nxt_a = a[f"block{block + 1}.weight"]
        nxt_b = b[f"block{block + 1}.weight"][:, perms[block + 1]]
        sim = sim + nxt_a @ nxt_b.T
    if block in model.placements:
        name = f"{head_prefix(block)}.fc1.weight"
        sim = sim + a[name] @ b[name].T
    return sim


@dataclass
class MatchResult:
    permutation: Permutation
    distance_before: float
    distance_after: float
    sweeps: int


def weight_match(model_a: MultiExitModel, model_b: MultiExitModel, seed: int = 0) -> MatchResult:
    """Permutation of B's hidden units minimising its Frobenius distance to A"""
    _check_same_architecture(model_a, model_b)
    rng = np.random.default_rng(seed)
    perms = Permutation.identity(model_a).layers
    a, b = model_a.params, model_b.params
    blocks = list(range(1, model_a.num_blocks + 1))

    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        improved = False
        for block in rng.permutation(blocks):
            block = int(block)
            sim = _layer_similarity(a, b, block, perms, model_a)
            current = assignment_cost(sim, perms[block])
            candidate = hungarian(-sim)
            gain = assignment_cost(sim, candidate) - current
            if gain > 1e-12 * max(1.0, abs(current)):
                perms[block] = candidate
                improved = True
        if not improved:
            break

    permutation = Permutation(perms)
    before = parameter_distance(model_a, model_b)
    after = parameter_distance(model_a, apply_permutation(model_b, permutation))
    logger.info(f"weight matching: distance {before:.6g} -> {after:.6g} after {sweeps} sweeps")
    return MatchResult(permutation=permutation, distance_before=before, distance_after=after, sweeps=sweeps)
