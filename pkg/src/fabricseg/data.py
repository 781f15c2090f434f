"""Shared data model: image/label pairs, datasets and multi-dataset bundles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class SamplePair:
    """One scalar image volume with its integer label volume (same extents)."""

    image: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.image.ndim != 3 or self.labels.ndim != 3:
            raise ValueError("image and labels must be 3-axis volumes")
        if self.image.shape != self.labels.shape:
            raise ValueError(
                f"image extents {self.image.shape} != label extents {self.labels.shape}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {self.labels.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.image.shape


@dataclass
class Dataset:
    """Named list of pairs with a class table and a train/validation split."""

    name: str
    pairs: list[SamplePair]
    class_names: list[str]
    train_idx: list[int] = field(default_factory=list)
    val_idx: list[int] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.class_names)
        for p in self.pairs:
            if p.labels.size and (p.labels.min() < 0 or p.labels.max() >= k):
                raise ValueError(
                    f"dataset {self.name}: labels outside [0, {k}) in {p.name or 'a pair'}"
                )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def train_pairs(self) -> list[SamplePair]:
        return [self.pairs[i] for i in self.train_idx]

    def val_pairs(self) -> list[SamplePair]:
        return [self.pairs[i] for i in self.val_idx]


@dataclass
class DatasetBundle:
    """Ordered collection of datasets of possibly different resolutions."""

    datasets: list[Dataset]
    seed: Optional[int] = None

    @property
    def num_classes(self) -> int:
        return max(ds.num_classes for ds in self.datasets)

    def __len__(self):
        return len(self.datasets)


def one_hot_labels(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(D,H,W) int labels -> (1, K, D, H, W) one-hot volume."""
    eye = np.eye(num_classes, dtype=dtype)
    return eye[labels].transpose(3, 0, 1, 2)[None]
