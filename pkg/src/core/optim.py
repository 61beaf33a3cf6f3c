"""
AdamW with decoupled weight decay and cosine annealing with warm restarts
Learning rate is resolved per optimizer step
"""

import math
from collections.abc import Mapping, MutableMapping
from dataclasses import dataclass, field

import numpy as np

from src.core.autodiff import Tensor
from src.core.errors import NonFiniteError


@dataclass
class AdamWState:
    """Per-parameter moments, a shared step counter and the AdamW hyperparameters"""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be non-negative")

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **hyper: float) -> "AdamWState":
        state = cls(**hyper)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adamw_step(
    state: AdamWState,
    params: MutableMapping[str, Tensor],
    grads: Mapping[str, Tensor],
    lr: float,
) -> tuple[MutableMapping[str, Tensor], AdamWState]:
    """One AdamW update of every parameter named in grads; params is updated in place"""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")

    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        p = p * (1.0 - lr * state.weight_decay)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bias2) + state.eps
        params[name] = p - lr * (m / bias1) / denom
        state.m[name] = m
        state.v[name] = v
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    eta_max: float = 5e-4
    eta_min: float = 0.0
    t_0: int = 100
    t_mult: float = 1.0

    def __post_init__(self) -> None:
        if not self.eta_max >= self.eta_min >= 0.0:
            raise ValueError("schedule requires eta_max >= eta_min >= 0")
        if self.t_0 < 1 or self.t_mult < 1:
            raise ValueError("schedule requires T_0 >= 1 and T_mult >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    period = float(schedule.t_0)
    t_cur = float(step)
    if schedule.t_mult == 1:
        t_cur = math.fmod(t_cur, period)
    else:
        while t_cur >= period:
            t_cur -= period
            period *= schedule.t_mult
    span = schedule.eta_max - schedule.eta_min
    return schedule.eta_min + span * (1.0 + math.cos(math.pi * t_cur / period)) / 2.0
