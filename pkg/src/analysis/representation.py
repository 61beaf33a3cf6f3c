"""
Representation instruments
Numerical rank and binned mutual information of per-block activations
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import svdvals
from scipy.stats import entropy

from src.core.autodiff import Tensor
from src.core.datasets import Split
from src.core.multiexit import MultiExitModel, forward_all

logger = logging.getLogger(__name__)

DEFAULT_REL_TOL = 1e-3
DEFAULT_BINS = 30


def numerical_rank(matrix: Tensor, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Number of singular values above rel_tol times the largest one"""
    a = np.asarray(matrix, dtype=np.float64)
    if a.size == 0:
        return 0
    sigma = svdvals(a)
    if sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_tol * sigma[0]))


def discretize(activations: Tensor, bins: int = DEFAULT_BINS) -> pd.DataFrame:
    """Equal-width bin index per coordinate over its observed range; constant coordinates map to bin 0"""
    if bins < 2:
        raise ValueError("at least two bins are required")
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    codes = {}
    for j in range(a.shape[1]):
        column = a[:, j]
        if column.min() == column.max():
            codes[j] = np.zeros(column.shape[0], dtype=np.int64)
        else:
            codes[j] = pd.cut(column, bins, labels=False).astype(np.int64)
    return pd.DataFrame(codes)


def binned_entropy(activations: Tensor, bins: int = DEFAULT_BINS) -> float:
    """Entropy in bits of the empirical bin-pattern distribution"""
    patterns = discretize(activations, bins)
    n = len(patterns)
    if n == 0:
        return 0.0
    counts = pd.util.hash_pandas_object(patterns, index=False).value_counts()
    if len(counts) == 1:
        return 0.0
    return float(min(entropy(counts.to_numpy(), base=2), np.log2(n)))


@dataclass
class BlockRank:
    block: int
    rank: int
    samples: int
    features: int
    tolerance: float


@dataclass
class RankProfile:
    blocks: list[BlockRank] = field(default_factory=list)

    @property
    def ranks(self) -> list[int]:
        return [b.rank for b in self.blocks]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(b) for b in self.blocks], columns=["block", "rank", "samples", "features", "tolerance"])


@dataclass
class BlockInformation:
    block: int
    bits: float
    bins: int
    samples: int


@dataclass
class MIProfile:
    blocks: list[BlockInformation] = field(default_factory=list)

    @property
    def bits(self) -> list[float]:
        return [b.bits for b in self.blocks]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(b) for b in self.blocks], columns=["block", "bits", "bins", "samples"])


def _activations(model: MultiExitModel, sample: Split) -> list[Tensor]:
    if len(sample) < 2:
        raise ValueError("representation instruments need at least two samples")
    outputs = forward_all(model, sample.features, capture_activations=True)
    assert outputs.activations is not None
    return outputs.activations


def rank_profile(model: MultiExitModel, sample: Split, rel_tol: float = DEFAULT_REL_TOL) -> RankProfile:
    profile = RankProfile()
    for block, a in enumerate(_activations(model, sample), start=1):
        profile.blocks.append(BlockRank(block, numerical_rank(a, rel_tol), a.shape[0], a.shape[1], rel_tol))
    logger.info(f"rank profile: {profile.ranks}")
    return profile


def mi_profile(model: MultiExitModel, sample: Split, bins: int = DEFAULT_BINS) -> MIProfile:
    profile = MIProfile()
    for block, a in enumerate(_activations(model, sample), start=1):
        profile.blocks.append(BlockInformation(block, binned_entropy(a, bins), bins, a.shape[0]))
    logger.info(f"MI profile (bits): {[round(b, 4) for b in profile.bits]}")
    return profile
