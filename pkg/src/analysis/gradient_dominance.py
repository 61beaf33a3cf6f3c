"""
Gradient dominance
Cosine similarity between each exit's backbone gradient and the summed backbone gradient
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.core.autodiff import Tensor
from src.core.datasets import Split
from src.core.multiexit import ExitWeights, MultiExitModel
from src.core.regimes import EpochContext

logger = logging.getLogger(__name__)


def exit_backbone_gradients(model: MultiExitModel, split: Split, alpha: ExitWeights) -> list[Tensor]:
    """Flattened d(alpha_k L_k)/d(backbone) for every exit k"""
    g = model.graph
    g.forward(model.bindings(split.features, split.targets, alpha.alpha))
    names = model.backbone_names
    flat = []
    for k in range(1, model.num_exits + 1):
        grads = g.grad(names, root=g.outputs[f"loss{k}"])
        flat.append(alpha.alpha[k - 1] * np.concatenate([grads[n].reshape(-1) for n in names]))
    return flat


def _cosine(a: Tensor, b: Tensor) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gradient_dominance(model: MultiExitModel, probe: Split, alpha: ExitWeights | None = None) -> Tensor:
    alpha = alpha or ExitWeights.uniform(model.num_exits)
    per_exit = exit_backbone_gradients(model, probe, alpha)
    total = np.sum(per_exit, axis=0)
    return np.array([_cosine(g, total) for g in per_exit])


def dominance_inner_products(model: MultiExitModel, probe: Split, alpha: ExitWeights | None = None) -> Tensor:
    """Unnormalised <g_k, g_total>; these sum to ||g_total||^2"""
    alpha = alpha or ExitWeights.uniform(model.num_exits)
    per_exit = exit_backbone_gradients(model, probe, alpha)
    total = np.sum(per_exit, axis=0)
    return np.array([float(np.dot(g, total)) for g in per_exit])


@dataclass
class GDTrace:
    num_exits: int
    epochs: list[int] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)

    def record(self, epoch: int, phase: str, gd: Tensor) -> None:
        if gd.shape != (self.num_exits,):
            raise ValueError(f"expected {self.num_exits} GD values, got shape {gd.shape}")
        self.epochs.append(epoch)
        self.phases.append(phase)
        self.values.append(gd)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            np.array(self.values).reshape(len(self.values), self.num_exits),
            columns=[f"gd_exit_{k}" for k in range(1, self.num_exits + 1)],
        )
        frame.insert(0, "phase", self.phases)
        frame.insert(0, "epoch", self.epochs)
        return frame


class GDRecorder:
    """Epoch callback logging gradient dominance every `every` epochs on a fixed probe batch"""

    def __init__(self, probe: Split, num_exits: int, alpha: ExitWeights | None = None, every: int = 5):
        if every < 1:
            raise ValueError("GD logging interval must be positive")
        self.probe = probe
        self.alpha = alpha
        self.every = every
        self.trace = GDTrace(num_exits)

    def __call__(self, context: EpochContext) -> None:
        if context.epoch % self.every:
            return
        gd = gradient_dominance(context.model, self.probe, self.alpha)
        self.trace.record(context.epoch, context.phase, gd)
        logger.debug(f"GD at epoch {context.epoch} ({context.phase}): {np.round(gd, 4).tolist()}")
