"""
Dataset containers shared by training, inference and analysis
"""

from dataclasses import dataclass, field

import numpy as np

from src.core.autodiff import Tensor
from src.core.errors import DatasetError
from src.core.multiexit import Task


@dataclass
class Split:
    features: Tensor
    targets: Tensor

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        if self.targets.shape[0] != self.features.shape[0]:
            raise DatasetError("features and targets disagree on sample count")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices: np.ndarray) -> "Split":
        return Split(self.features[indices], self.targets[indices])

    def head(self, n: int) -> "Split":
        return Split(self.features[:n], self.targets[:n])


@dataclass
class Dataset:
    """Train, early-stopping validation and test splits"""

    train: Split
    val: Split
    test: Split
    task: Task = field(default_factory=Task)
    provenance: str = ""

    def __post_init__(self) -> None:
        widths = {self.train.num_features, self.val.num_features, self.test.num_features}
        if len(widths) != 1:
            raise DatasetError(f"splits disagree on feature width: {sorted(widths)}")
        if self.task.is_classification:
            for name, split in self.splits().items():
                labels = split.targets
                if labels.size and (labels.min() < 0 or labels.max() >= self.task.num_classes):
                    raise DatasetError(f"{name} split has class ids outside [0, {self.task.num_classes})")

    @property
    def num_features(self) -> int:
        return self.train.num_features

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def split(self, name: str) -> Split:
        try:
            return self.splits()[name]
        except KeyError:
            raise DatasetError(f"unknown split '{name}'") from None
