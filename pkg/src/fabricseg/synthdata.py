"""Synthetic multi-resolution volumetric datasets.

Each example is an additive composition of randomly placed shapes (ellipsoid,
box, shell) with one intensity band per class plus Gaussian noise; the labels
are the exact analytic masks.  Resolution ranges differ per dataset, so a
bundle exercises the multi-resolution training path end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, DatasetBundle, SamplePair

SHAPE_KINDS = ("ellipsoid", "box", "shell")


@dataclass(frozen=True)
class SyntheticSpec:
    resolution_ranges: tuple[tuple[int, int], ...] = ((24, 32), (33, 40), (41, 48))
    n_examples: int = 20
    num_classes: int = 3                  # including background 0
    shapes: tuple[str, ...] = SHAPE_KINDS
    noise: float = 0.05
    seed: int = 0
    val_fraction: float = 0.25
    spacings: Optional[tuple[tuple[float, float, float], ...]] = None

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + foreground)")
        for lo, hi in self.resolution_ranges:
            if lo < 8 or hi < lo:
                raise ValueError(f"bad resolution range ({lo}, {hi})")
        bad = set(self.shapes) - set(SHAPE_KINDS)
        if bad:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.spacings is not None and len(self.spacings) != len(self.resolution_ranges):
            raise ValueError("spacings must match the number of datasets")

    @property
    def n_datasets(self) -> int:
        return len(self.resolution_ranges)


def ellipsoid_mask(shape, centre, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                             indexing="ij")
    cz, cy, cx = centre
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def box_mask(shape, centre, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                             indexing="ij")
    cz, cy, cx = centre
    rz, ry, rx = radii
    return (np.abs(zz - cz) <= rz) & (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def shell_mask(shape, centre, radii, thickness: float = 0.45) -> np.ndarray:
    outer = ellipsoid_mask(shape, centre, radii)
    inner = ellipsoid_mask(shape, centre, tuple(r * (1.0 - thickness) for r in radii))
    return outer & ~inner


_SHAPE_FN = {"ellipsoid": ellipsoid_mask, "box": box_mask, "shell": shell_mask}


def class_intensity(k: int, num_classes: int) -> float:
    """Distinct band per foreground class, away from the zero background."""
    n_fg = num_classes - 1
    if n_fg == 1:
        return 0.7
    return 0.35 + 0.55 * (k - 1) / (n_fg - 1)


def _make_example(shape, num_classes, shapes, noise, rng) -> tuple[np.ndarray, np.ndarray]:
    ext = np.asarray(shape)
    for _ in range(50):
        image = np.zeros(shape, dtype=np.float32)
        labels = np.zeros(shape, dtype=np.uint8)
        for k in range(1, num_classes):
            kind = shapes[int(rng.integers(0, len(shapes)))]
            radii = rng.uniform(0.12, 0.28, size=3) * ext
            centre = rng.uniform(0.28, 0.72, size=3) * (ext - 1)
            mask = _SHAPE_FN[kind](shape, centre, radii)
            intensity = class_intensity(k, num_classes) + float(rng.uniform(-0.02, 0.02))
            image[mask] = intensity
            labels[mask] = k
        present = set(np.unique(labels))
        if present == set(range(num_classes)):
            if noise > 0:
                image = image + rng.normal(0.0, noise, size=shape).astype(np.float32)
            return image.astype(np.float32), labels
    raise RuntimeError("could not place all classes after 50 attempts")


def generate(spec: SyntheticSpec) -> DatasetBundle:
    """Deterministic bundle: same spec and seed give a bitwise-identical result."""
    rng = np.random.default_rng(spec.seed)
    class_names = ["background"] + [f"class{k}" for k in range(1, spec.num_classes)]
    datasets = []
    for d, (lo, hi) in enumerate(spec.resolution_ranges):
        spacing = spec.spacings[d] if spec.spacings is not None else (1.0, 1.0, 1.0)
        pairs = []
        extents_seen = set()
        for e in range(spec.n_examples):
            extents = tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))
            if e == 1 and hi > lo and len(extents_seen) == 1:
                while extents in extents_seen:
                    extents = tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))
            extents_seen.add(extents)
            image, labels = _make_example(extents, spec.num_classes, spec.shapes,
                                          spec.noise, rng)
            pairs.append(SamplePair(image, labels, spacing=spacing,
                                    name=f"ds{d}/ex{e}"))
        order = list(rng.permutation(spec.n_examples))
        n_val = int(round(spec.val_fraction * spec.n_examples))
        n_val = min(n_val, spec.n_examples - 1)
        val_idx = sorted(order[:n_val])
        train_idx = sorted(order[n_val:])
        datasets.append(Dataset(name=f"synth{d}", pairs=pairs,
                                class_names=list(class_names),
                                train_idx=train_idx, val_idx=val_idx))
    return DatasetBundle(datasets=datasets, seed=spec.seed)
