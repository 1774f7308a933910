"""The 28-D metadata side input: construction and min-max normalization.

Fixed layout (frozen, format version 1):

  [0]      d_center      pixel distance of the box center from the principal point
  [1:5]    box corners   x_min, y_min, x_max, y_max (full-frame pixels)
  [5]      scale_ratio   square-expanded box side / crop size
  [6:15]   rotation      optical axis -> box center, row-major 3x3
  [15:24]  intrinsics    crop-adjusted K, row-major 3x3
  [24:28]  distortion    k1..k4
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .geometry import (
    BoundingBox,
    FisheyeCamera,
    bbox_center_ray,
    crop_intrinsics,
    rotation_to_ray,
    square_crop_box,
)

METADATA_DIM = 28
LAYOUT_VERSION = 1
CROP_MARGIN = 1.25


@dataclass(frozen=True)
class MetadataVector:
    raw: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if v.shape[0] != METADATA_DIM:
            raise ShapeMismatch(f"metadata must have {METADATA_DIM} entries, got {v.shape[0]}")
        v.setflags(write=False)
        object.__setattr__(self, "raw", v)

    @property
    def d_center(self) -> float:
        return float(self.raw[0])

    @property
    def corners(self) -> np.ndarray:
        return self.raw[1:5]

    @property
    def scale_ratio(self) -> float:
        return float(self.raw[5])

    @property
    def rotation(self) -> np.ndarray:
        return self.raw[6:15].reshape(3, 3)

    @property
    def intrinsics(self) -> np.ndarray:
        return self.raw[15:24].reshape(3, 3)

    @property
    def distortion(self) -> np.ndarray:
        return self.raw[24:28]


def compute_metadata(
    cam: FisheyeCamera, box: BoundingBox, crop_size: int, margin: float = CROP_MARGIN
) -> MetadataVector:
    """Build the metadata vector for a detector box.

    The box is the tight detection; squaring with the crop margin happens
    here so scale_ratio and the crop intrinsics describe the actual network
    input window.
    """
    center = box.center
    d_center = math.hypot(center[0] - cam.cx, center[1] - cam.cy)
    square = square_crop_box(box, margin)
    rot = rotation_to_ray(bbox_center_ray(cam, box))
    ci = crop_intrinsics(cam, square, crop_size)
    raw = np.concatenate(
        [
            [d_center],
            box.as_array(),
            [square.width / crop_size],
            rot.ravel(),
            ci.matrix.ravel(),
            np.array(cam.distortion, dtype=np.float64),
        ]
    )
    return MetadataVector(raw)


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.maximum, dtype=np.float64).reshape(-1)
        if lo.shape != (METADATA_DIM,) or hi.shape != (METADATA_DIM,):
            raise ShapeMismatch("stats must hold 28 mins and 28 maxes")
        if np.any(lo > hi):
            raise ShapeMismatch("per-dimension min must not exceed max")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def constant_dims(self) -> np.ndarray:
        """Boolean mask of dimensions with min == max over the training set."""
        return self.minimum == self.maximum


def fit_normalization(dataset: Iterable[MetadataVector | np.ndarray]) -> NormalizationStats:
    """Exact per-dimension min/max over a nonempty training set."""
    rows = [v.raw if isinstance(v, MetadataVector) else np.asarray(v, dtype=np.float64)
            for v in dataset]
    if not rows:
        raise EmptyDataset("cannot fit normalization on an empty dataset")
    stacked = np.stack(rows)
    return NormalizationStats(stacked.min(axis=0), stacked.max(axis=0))


def normalize(v: MetadataVector | np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map to [-1, 1] per dimension; clamped, constant dimensions map to 0."""
    raw = v.raw if isinstance(v, MetadataVector) else np.asarray(v, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (raw - stats.minimum) / safe - 1.0
    out = np.clip(out, -1.0, 1.0)
    return np.where(span > 0, out, 0.0)


def normalize_many(vectors: Sequence[MetadataVector | np.ndarray],
                   stats: NormalizationStats) -> np.ndarray:
    return np.stack([normalize(v, stats) for v in vectors])
