"""
Dataset Manager for the Multi-Exit Lab
Synthetic generators, CSV ingestion, stratified splitting and standardisation
"""

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.datasets import Dataset, Split
from src.core.errors import DatasetError
from src.core.multiexit import Task, TaskKind

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)

# (share of samples, t range) per difficulty tier
TIERS = (
    ("easy", 0.5, (0.0, 0.15)),
    ("medium", 0.3, (0.15, 0.3)),
    ("hard", 0.2, (0.3, 0.45)),
)
CENTROID_SCALE = 3.0
VORONOI_MARGIN = 0.05


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[int]:
    """Largest-remainder rounding; ties favour the later split"""
    if n < 0 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"invalid split fractions {list(fractions)}")
    exact = [n * f for f in fractions]
    sizes = [int(np.floor(e + 1e-9)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    order = sorted(range(len(fractions)), key=lambda i: (-round(remainders[i], 9), -i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave classes round-robin"""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    longest = max(len(p) for p in per_class)
    order = []
    for i in range(longest):
        for members in per_class:
            if i < len(members):
                order.append(members[i])
    return np.array(order, dtype=np.int64)


def _partition(
    features: np.ndarray,
    targets: np.ndarray,
    order: np.ndarray,
    fractions: Sequence[float],
) -> list[Split]:
    sizes = split_sizes(len(order), fractions)
    bounds = np.cumsum([0] + sizes)
    return [Split(features[order[a:b]], targets[order[a:b]]) for a, b in zip(bounds[:-1], bounds[1:])]


def _spirals(n: int, d: int, classes: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n) % classes
    t = rng.uniform(0.05, 1.0, size=n)
    angle = 2.0 * np.pi * labels / classes + 3.0 * np.pi * t
    features = np.zeros((n, d))
    features[:, 0] = t * np.cos(angle)
    features[:, 1] = t * np.sin(angle)
    features += noise * 0.1 * rng.standard_normal((n, d))
    return features, labels


def _tiered_blobs(n: int, d: int, classes: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    centroids = CENTROID_SCALE * rng.standard_normal((classes, d))
    labels = np.arange(n) % classes
    features = np.zeros((n, d))
    for c in range(classes):
        members = np.flatnonzero(labels == c)
        counts = split_sizes(len(members), [share for _, share, _ in TIERS])
        ranges = np.repeat(np.arange(len(TIERS)), counts)
        others = [o for o in range(classes) if o != c]
        for row, tier in zip(members, ranges):
            low, high = TIERS[tier][2]
            for _ in range(1000):
                toward = centroids[others[rng.integers(len(others))]]
                base = centroids[c] + rng.uniform(low, high) * (toward - centroids[c])
                dist = np.linalg.norm(centroids - base, axis=1)
                if np.all(np.delete(dist, c) - dist[c] > VORONOI_MARGIN):
                    break
            else:
                raise DatasetError(f"could not place a {TIERS[tier][0]} sample for class {c}")
            features[row] = base
    features += noise * rng.standard_normal((n, d))
    return features, labels


GENERATORS = {
    "spirals": _spirals,
    "tiered-blobs": _tiered_blobs,
}


def generate_synthetic(
    kind: str,
    n: int,
    d: int,
    classes: int,
    noise: float,
    seed: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> Dataset:
    """Deterministic classification dataset with a stratified train/val/test split"""
    if kind not in GENERATORS:
        raise DatasetError(f"unknown synthetic dataset '{kind}'")
    if classes < 2 or n < 3 * classes:
        raise DatasetError("synthetic datasets need C >= 2 and n >= 3 * C")
    if d < 2 or noise < 0:
        raise DatasetError("synthetic datasets need d >= 2 and non-negative noise")
    rng = np.random.default_rng(seed)
    features, labels = GENERATORS[kind](n, d, classes, noise, rng)
    train, val, test = _partition(features, labels, stratified_order(labels, rng), fractions)
    provenance = f"{kind}(n={n}, d={d}, C={classes}, noise={noise}, seed={seed})"
    logger.info(f"generated {provenance}: {len(train)}/{len(val)}/{len(test)}")
    return Dataset(train, val, test, Task(TaskKind.CLASSIFICATION, classes), provenance)


def standardize(dataset: Dataset) -> Dataset:
    """Scale every split with the train split's per-column mean and population std"""
    mean = dataset.train.features.mean(axis=0)
    std = dataset.train.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    scaled = [Split((s.features - mean) / std, s.targets) for s in (dataset.train, dataset.val, dataset.test)]
    return Dataset(*scaled, task=dataset.task, provenance=dataset.provenance)


def _numeric_frame(frame: pd.DataFrame, path: Path) -> pd.DataFrame:
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna() & frame.notna()
    missing = frame.isna()
    for mask, problem in ((bad, "non-numeric"), (missing, "empty")):
        if mask.to_numpy().any():
            row, col = np.argwhere(mask.to_numpy())[0]
            # header is line 1
            raise DatasetError(
                f"{path}:{row + 2}: {problem} value {frame.iat[row, col]!r} in column '{frame.columns[col]}'"
            )
    return numeric.astype(np.float64)


def load_csv_dataset(
    path: str | Path,
    label_column: str,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    task: TaskKind = TaskKind.CLASSIFICATION,
) -> Dataset:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    except FileNotFoundError as e:
        raise DatasetError(f"dataset file not found: {path}") from e
    except pd.errors.ParserError as e:
        raise DatasetError(f"cannot parse {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError(f"{path} is empty") from e
    if label_column not in frame.columns:
        raise DatasetError(f"label column '{label_column}' not found in {path}")
    if "split" in frame.columns:
        frame = frame.drop(columns="split")
    if len(frame) < len(fractions):
        raise DatasetError(f"{path} has too few rows to split")

    numeric = _numeric_frame(frame, path)
    features = numeric.drop(columns=label_column).to_numpy()
    rng = np.random.default_rng(seed)
    if task is TaskKind.CLASSIFICATION:
        codes, classes = pd.factorize(numeric[label_column], sort=True)
        targets = codes.astype(np.int64)
        order = stratified_order(targets, rng)
        dataset_task = Task(TaskKind.CLASSIFICATION, max(len(classes), 2))
    else:
        targets = numeric[label_column].to_numpy()
        order = rng.permutation(len(targets))
        dataset_task = Task(TaskKind.REGRESSION, 0)

    train, val, test = _partition(features, targets, order, fractions)
    dataset = Dataset(train, val, test, dataset_task, f"csv({path.name}, label={label_column}, seed={seed})")
    logger.info(f"loaded {path}: {len(train)}/{len(val)}/{len(test)} rows, {features.shape[1]} features")
    return standardize(dataset)


def dataset_frame(dataset: Dataset, label_column: str = "label") -> pd.DataFrame:
    """All splits in one frame with a split column"""
    frames = []
    for name, split in dataset.splits().items():
        frame = pd.DataFrame(split.features, columns=[f"x{i}" for i in range(split.num_features)])
        frame[label_column] = split.targets
        frame["split"] = name
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def write_dataset_csv(dataset: Dataset, path: str | Path, label_column: str = "label") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset, label_column).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"wrote dataset to {path}")
    return path
