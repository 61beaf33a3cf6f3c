"""
Shared fixtures for the multi-exit lab test suite
Small models and datasets that train in well under a second
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from infrastructure.dataset_manager import generate_synthetic  # noqa: E402
from src.core.datasets import Dataset, Split  # noqa: E402
from src.core.multiexit import BackboneSpec, HeadSpec, MultiExitModel, Task, TaskKind, build_model  # noqa: E402
from src.core.regimes import RegimeSpec  # noqa: E402


def make_model(
    input_dim: int = 4,
    width: int = 6,
    num_blocks: int = 3,
    placements: tuple[int, ...] = (1, 2, 3),
    classes: int = 3,
    seed: int = 0,
    head: HeadSpec | None = None,
    regression: bool = False,
) -> MultiExitModel:
    task = Task(TaskKind.REGRESSION, 0) if regression else Task(TaskKind.CLASSIFICATION, classes)
    return build_model(BackboneSpec(input_dim, width, num_blocks), placements, head or HeadSpec(), task, seed)


def make_split(n: int = 12, d: int = 4, classes: int = 3, seed: int = 0, regression: bool = False) -> Split:
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, d))
    targets = rng.standard_normal(n) if regression else np.arange(n) % classes
    return Split(features, targets)


@pytest.fixture
def small_model() -> MultiExitModel:
    return make_model()


@pytest.fixture
def small_split() -> Split:
    return make_split()


@pytest.fixture
def tiny_dataset() -> Dataset:
    return generate_synthetic("tiered-blobs", 60, 4, 3, 0.3, seed=0)


@pytest.fixture
def tiny_spec() -> RegimeSpec:
    return RegimeSpec(max_epochs=3, patience=10, batch_size=16, lr=1e-2)
