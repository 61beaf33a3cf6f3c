"""
Mode connectivity
Loss along the permuted linear path between two checkpoints and over the plane through three
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from src.analysis.permutation import Permutation, apply_permutation, weight_match
from src.core.autodiff import Tensor
from src.core.datasets import Split
from src.core.errors import ArchitectureMismatchError
from src.core.multiexit import ExitWeights, LossBreakdown, MultiExitModel

logger = logging.getLogger(__name__)

PLANE_MARGIN = 0.15
REPORT_CLIP = 2.0


class GridMode(str, Enum):
    PATH = "path"
    PLANE = "plane"


@dataclass
class ConnectivityGrid:
    mode: GridMode
    axes: list[Tensor]
    total: Tensor
    per_exit: Tensor
    permutations: list[Permutation] = field(default_factory=list)

    def clipped(self) -> Tensor:
        return np.minimum(self.total, REPORT_CLIP)

    def to_frame(self) -> pd.DataFrame:
        k = self.per_exit.shape[-1]
        exit_columns = [f"loss_exit_{i}" for i in range(1, k + 1)]
        if self.mode is GridMode.PATH:
            frame = pd.DataFrame({"lambda": self.axes[0], "total_loss": self.total})
            frame[exit_columns] = self.per_exit
            return frame
        s, t = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        frame = pd.DataFrame({"s": s.reshape(-1), "t": t.reshape(-1), "total_loss": self.total.reshape(-1)})
        frame[exit_columns] = self.per_exit.reshape(-1, k)
        return frame


def evaluate_params(
    template: MultiExitModel,
    params: Mapping[str, Tensor],
    split: Split,
    alpha: ExitWeights | None = None,
) -> LossBreakdown:
    return template.with_params(params).loss_breakdown(split.features, split.targets, alpha)


def interpolate_params(a: MultiExitModel, b: MultiExitModel, lam: float) -> dict[str, Tensor]:
    return {n: (1.0 - lam) * a.params[n] + lam * b.params[n] for n in a.parameter_names}


def interpolate_loss(
    model_a: MultiExitModel,
    model_b: MultiExitModel,
    permutation: Permutation | None,
    lambdas: Sequence[float],
    split: Split,
    alpha: ExitWeights | None = None,
) -> ConnectivityGrid:
    """Multi-exit loss along (1 - lambda) A + lambda * perm(B)"""
    if model_a.config != model_b.config:
        raise ArchitectureMismatchError("interpolation endpoints must share an architecture")
    grid = np.asarray(lambdas, dtype=np.float64)
    if grid.size == 0 or grid.min() < 0.0 or grid.max() > 1.0 or 0.0 not in grid or 1.0 not in grid:
        raise ValueError("lambda grid must lie in [0, 1] and contain both endpoints")
    aligned = apply_permutation(model_b, permutation) if permutation is not None else model_b

    totals = []
    per_exit = []
    for lam in grid:
        result = evaluate_params(model_a, interpolate_params(model_a, aligned, float(lam)), split, alpha)
        totals.append(result.total)
        per_exit.append(result.per_exit)
    logger.info(f"path loss: endpoints {totals[0]:.6g} / {totals[-1]:.6g}, max {max(totals):.6g}")
    return ConnectivityGrid(
        mode=GridMode.PATH,
        axes=[grid],
        total=np.array(totals),
        per_exit=np.array(per_exit),
        permutations=[permutation] if permutation is not None else [],
    )


def plane_axis(resolution: int, margin: float = PLANE_MARGIN) -> Tensor:
    """Coordinates with 0 and 1 on grid points and a margin on both sides"""
    if resolution < 2:
        raise ValueError("plane resolution must be at least 2")
    pad = int(round(margin * (resolution - 1)))
    if resolution - 1 - 2 * pad < 1:
        pad = 0
    return (np.arange(resolution) - pad) / (resolution - 1 - 2 * pad)


def plane_params(
    a: MultiExitModel, b: MultiExitModel, c: MultiExitModel, s: float, t: float
) -> dict[str, Tensor]:
    """A + s (B - A) + t (C - A)"""
    return {
        n: a.params[n] + s * (b.params[n] - a.params[n]) + t * (c.params[n] - a.params[n])
        for n in a.parameter_names
    }


def plane_loss(
    model_a: MultiExitModel,
    model_b: MultiExitModel,
    model_c: MultiExitModel,
    resolution: int,
    split: Split,
    alpha: ExitWeights | None = None,
    seed: int = 0,
) -> ConnectivityGrid:
    """Loss over the affine plane through A and the aligned B and C; A sits at (0, 0)"""
    match_b = weight_match(model_a, model_b, seed)
    match_c = weight_match(model_a, model_c, seed)
    b = apply_permutation(model_b, match_b.permutation)
    c = apply_permutation(model_c, match_c.permutation)

    axis = plane_axis(resolution)
    total = np.zeros((resolution, resolution))
    per_exit = np.zeros((resolution, resolution, model_a.num_exits))
    for i, s in enumerate(axis):
        for j, t in enumerate(axis):
            result = evaluate_params(model_a, plane_params(model_a, b, c, float(s), float(t)), split, alpha)
            total[i, j] = result.total
            per_exit[i, j] = result.per_exit
    logger.info(f"plane loss on {resolution}x{resolution} grid: min {total.min():.6g}, max {total.max():.6g}")
    return ConnectivityGrid(
        mode=GridMode.PLANE,
        axes=[axis, axis],
        total=total,
        per_exit=per_exit,
        permutations=[match_b.permutation, match_c.permutation],
    )
