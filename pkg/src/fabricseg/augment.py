"""3D augmentation of image/label pairs: translation, rotation, affine jitter
and elastic deformation, with truncated-normal parameter sampling.

All warps are backward maps about the volume centre: each output voxel samples
the input at the inverse-mapped coordinate, trilinear for the image and
nearest-neighbour for labels, zero / background fill outside the volume.  The
three linear transforms compose into a single resampling pass; elastic
deformation is a second pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import SamplePair

ALL_TRANSFORMS = ("translation", "rotation", "affine", "elastic")


@dataclass(frozen=True)
class AugmentSpec:
    max_translation: float = 8.0   # voxels per axis
    max_rotation: float = 10.0     # degrees per axis
    affine_jitter: float = 0.1     # max |entry - identity|
    elastic_alpha: float = 10.0    # displacement magnitude, voxels
    elastic_sigma: float = 8.0     # smoothing radius, voxels
    enabled: tuple[str, ...] = ALL_TRANSFORMS

    def __post_init__(self):
        for name in ("max_translation", "max_rotation", "affine_jitter",
                     "elastic_alpha", "elastic_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        bad = set(self.enabled) - set(ALL_TRANSFORMS)
        if bad:
            raise ValueError(f"unknown transforms {sorted(bad)}")
        object.__setattr__(self, "enabled", tuple(self.enabled))


def truncated_normal(rng: np.random.Generator, size=None) -> np.ndarray:
    """Standard normal draws redrawn until they land inside [-1, 1]."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 1.0
    while np.any(bad):
        out = np.where(bad, rng.standard_normal(shape), out)
        bad = np.abs(out) > 1.0
    return out


@dataclass
class AugmentParams:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    affine_matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    elastic_alpha: float = 0.0
    elastic_sigma: float = 0.0


def sample_params(spec: AugmentSpec, rng: np.random.Generator) -> AugmentParams:
    """Truncated-normal samples in [-1,1], scaled to each transform's range.

    The full draw sequence runs regardless of which transforms are enabled, so
    a fixed seed gives the same parameters under any `enabled` subset.
    """
    p = AugmentParams()
    p.translation = truncated_normal(rng, 3) * spec.max_translation
    p.rotation_deg = truncated_normal(rng, 3) * spec.max_rotation
    p.affine_matrix = np.eye(3) + truncated_normal(rng, (3, 3)) * spec.affine_jitter
    p.elastic_alpha = float(truncated_normal(rng)) * spec.elastic_alpha
    p.elastic_sigma = spec.elastic_sigma
    return p


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about the volume axes (depth, height, width), composed d @ h @ w."""
    ad, ah, aw = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cd, sd = np.cos(ad), np.sin(ad)
    ch, sh = np.cos(ah), np.sin(ah)
    cw, sw = np.cos(aw), np.sin(aw)
    rd = np.array([[1, 0, 0], [0, cd, -sd], [0, sd, cd]])
    rh = np.array([[ch, 0, sh], [0, 1, 0], [-sh, 0, ch]])
    rw = np.array([[cw, -sw, 0], [sw, cw, 0], [0, 0, 1]])
    return rd @ rh @ rw


def _warp(pair: SamplePair, coords: np.ndarray) -> SamplePair:
    image = map_coordinates(pair.image, coords, order=1, mode="constant", cval=0.0)
    labels = map_coordinates(pair.labels, coords, order=0, mode="constant", cval=0)
    return SamplePair(image.astype(np.float32), labels.astype(pair.labels.dtype),
                      spacing=pair.spacing, name=pair.name)


def _identity_grid(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                                indexing="ij"))


def apply_affine(pair: SamplePair, matrix: np.ndarray, offset) -> SamplePair:
    """Warp by the forward map p = M (q - c) + c + offset, c the volume centre."""
    matrix = np.asarray(matrix, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    if abs(np.linalg.det(matrix)) < 1e-12:
        raise ValueError("affine matrix is singular")
    inv = np.linalg.inv(matrix)
    shape = pair.image.shape
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    grid = _identity_grid(shape)
    rel = grid - (centre + offset)[:, None, None, None]
    coords = np.einsum("ab,bdhw->adhw", inv, rel) + centre[:, None, None, None]
    return _warp(pair, coords)


def elastic_field(shape, alpha: float, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Per-axis uniform noise in [-1,1], Gaussian-smoothed, scaled by alpha."""
    field_arr = rng.uniform(-1.0, 1.0, size=(3,) + tuple(shape))
    if sigma > 0:
        for ax in range(3):
            field_arr[ax] = gaussian_filter(field_arr[ax], sigma)
    return field_arr * alpha


def apply_elastic(pair: SamplePair, alpha: float, sigma: float,
                  rng: np.random.Generator) -> SamplePair:
    """Backward warp along a smoothed random displacement field."""
    if alpha < 0 or sigma < 0:
        raise ValueError("alpha and sigma must be >= 0")
    if alpha == 0:
        return SamplePair(pair.image.copy(), pair.labels.copy(),
                          spacing=pair.spacing, name=pair.name)
    shape = pair.image.shape
    coords = _identity_grid(shape) + elastic_field(shape, alpha, sigma, rng)
    return _warp(pair, coords)


def apply_random(pair: SamplePair, spec: AugmentSpec,
                 rng: np.random.Generator) -> SamplePair:
    """Sample parameters and compose translation, rotation, affine, elastic.

    The three linear transforms fold into one warp (applied in that order);
    elastic deformation, when enabled, is a second warp of the result.
    """
    p = sample_params(spec, rng)
    t = p.translation if "translation" in spec.enabled else np.zeros(3)
    r = rotation_matrix(p.rotation_deg) if "rotation" in spec.enabled else np.eye(3)
    a = p.affine_matrix if "affine" in spec.enabled else np.eye(3)
    m = a @ r
    out = pair
    if not (np.allclose(m, np.eye(3)) and np.allclose(t, 0)):
        out = apply_affine(out, m, m @ t)
    if "elastic" in spec.enabled and p.elastic_alpha != 0.0:
        out = apply_elastic(out, abs(p.elastic_alpha), p.elastic_sigma, rng)
    if out is pair:
        out = SamplePair(pair.image.copy(), pair.labels.copy(),
                         spacing=pair.spacing, name=pair.name)
    return out
