"""Segmentation metrics: Dice overlap and symmetric mean surface distance."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree


def dsc(pred_labels: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Dice similarity 2|A^B| / (|A|+|B|) for class k; 1.0 when both masks are empty."""
    if pred_labels.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred_labels.shape} vs {gt.shape}")
    a = pred_labels == k
    b = gt == k
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbour.

    Voxels outside the volume count as background, so foreground touching the
    volume border is surface.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)]
        interior &= padded[tuple(hi)]
    return m & ~interior


def msd(pred_labels: np.ndarray, gt: np.ndarray, k: int,
        spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric mean surface distance in mm: the two directed nearest-surface
    mean distances, averaged.  Undefined (raises) when either mask is empty."""
    if pred_labels.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred_labels.shape} vs {gt.shape}")
    a = pred_labels == k
    b = gt == k
    if not a.any() or not b.any():
        raise ValueError(f"msd undefined: class {k} mask is empty")
    sp = np.asarray(spacing, dtype=np.float64)
    sa = np.argwhere(surface_voxels(a)) * sp
    sb = np.argwhere(surface_voxels(b)) * sp
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def evaluate_pairs(net, pairs, num_classes: int) -> dict[int, dict[str, float]]:
    """Per-class mean/median DSC and MSD over argmax predictions on a split.

    MSD entries are NaN where either surface is empty for a case; the mean and
    median then skip those cases (and are NaN if no case was defined).
    """
    from .tensor import Tensor5

    per_class_dsc: dict[int, list[float]] = {k: [] for k in range(1, num_classes)}
    per_class_msd: dict[int, list[float]] = {k: [] for k in range(1, num_classes)}
    for pair in pairs:
        x = Tensor5(pair.image[None, None].astype(np.float32))
        prob = net.forward(x, training=False)
        pred = prob.data[0].argmax(axis=0)
        for k in range(1, num_classes):
            per_class_dsc[k].append(dsc(pred, pair.labels, k))
            try:
                per_class_msd[k].append(msd(pred, pair.labels, k, pair.spacing))
            except ValueError:
                per_class_msd[k].append(float("nan"))
    table: dict[int, dict[str, float]] = {}
    for k in range(1, num_classes):
        d = np.asarray(per_class_dsc[k], dtype=np.float64)
        m = np.asarray(per_class_msd[k], dtype=np.float64)
        m_ok = m[~np.isnan(m)]
        table[k] = {
            "dsc_mean": float(d.mean()) if d.size else float("nan"),
            "dsc_median": float(np.median(d)) if d.size else float("nan"),
            "msd_mean": float(m_ok.mean()) if m_ok.size else float("nan"),
            "msd_median": float(np.median(m_ok)) if m_ok.size else float("nan"),
            "n_cases": int(d.size),
        }
    return table
