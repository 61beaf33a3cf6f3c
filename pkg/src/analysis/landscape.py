"""
Filter-normalised loss landscapes
f(x, y) = L(theta + x * delta + y * eta) on a square grid centred at the trained parameters
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.core.autodiff import Tensor
from src.core.datasets import Split
from src.core.multiexit import ExitWeights, MultiExitModel, parameter_rng

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 51


def filter_normalize(direction: Tensor, reference: Tensor) -> Tensor:
    """Rescale each output-neuron slice of direction to the norm of the matching reference slice"""
    if direction.ndim == 1:
        norm = np.linalg.norm(direction)
        return direction * (np.linalg.norm(reference) / norm) if norm > 0 else np.zeros_like(direction)
    d_norm = np.linalg.norm(direction, axis=0)
    r_norm = np.linalg.norm(reference, axis=0)
    scale = np.divide(r_norm, d_norm, out=np.zeros_like(r_norm), where=d_norm > 0)
    return direction * scale[None, :]


def random_direction(model: MultiExitModel, seed: int, label: str) -> dict[str, Tensor]:
    direction = {}
    for name in model.parameter_names:
        raw = parameter_rng(seed, f"{label}/{name}").standard_normal(model.params[name].shape)
        direction[name] = filter_normalize(raw, model.params[name])
    return direction


def landscape_axis(resolution: int) -> Tensor:
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("landscape resolution must be odd and at least 3")
    half = (resolution - 1) / 2
    return (np.arange(resolution) - half) / half


@dataclass
class LandscapeGrid:
    axis: Tensor
    total: Tensor
    per_exit: Tensor
    delta: dict[str, Tensor]
    eta: dict[str, Tensor]

    @property
    def centre(self) -> int:
        return self.axis.shape[0] // 2

    def to_frame(self) -> pd.DataFrame:
        x, y = np.meshgrid(self.axis, self.axis, indexing="ij")
        frame = pd.DataFrame({"x": x.reshape(-1), "y": y.reshape(-1), "total_loss": self.total.reshape(-1)})
        k = self.per_exit.shape[-1]
        frame[[f"loss_exit_{i}" for i in range(1, k + 1)]] = self.per_exit.reshape(-1, k)
        return frame


def perturbed_params(
    model: MultiExitModel, delta: dict[str, Tensor], eta: dict[str, Tensor], x: float, y: float
) -> dict[str, Tensor]:
    return {n: model.params[n] + x * delta[n] + y * eta[n] for n in model.parameter_names}


def loss_landscape(
    model: MultiExitModel,
    split: Split,
    resolution: int = DEFAULT_RESOLUTION,
    seed: int = 0,
    alpha: ExitWeights | None = None,
) -> LandscapeGrid:
    """Total and per-exit losses over [-1, 1]^2; every exit shares the same two directions"""
    axis = landscape_axis(resolution)
    delta = random_direction(model, seed, "delta")
    eta = random_direction(model, seed, "eta")
    total = np.zeros((resolution, resolution))
    per_exit = np.zeros((resolution, resolution, model.num_exits))
    probe = model.copy()
    for i, x in enumerate(axis):
        for j, y in enumerate(axis):
            probe.params.update(perturbed_params(model, delta, eta, float(x), float(y)))
            result = probe.loss_breakdown(split.features, split.targets, alpha)
            total[i, j] = result.total
            per_exit[i, j] = result.per_exit
    logger.info(f"landscape {resolution}x{resolution}: centre {total[resolution // 2, resolution // 2]:.6g}")
    return LandscapeGrid(axis=axis, total=total, per_exit=per_exit, delta=delta, eta=eta)
