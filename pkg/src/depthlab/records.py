"""Plain containers shared by the data, preprocessing and training code.

Depth maps are float arrays of shape (H, W) in meters where 0 means missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Intrinsics


@dataclass(frozen=True)
class SegmentationMap:
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"segmentation must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"class ids must lie in [0, {self.class_count}), found max {labels.max()}")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """(C, H, W) one-hot expansion."""
        return one_hot(self.labels, self.class_count, dtype)


def one_hot(labels: np.ndarray, class_count: int, dtype=np.float32) -> np.ndarray:
    """One-hot expansion on a new axis placed before the two spatial axes."""
    labels = np.asarray(labels)
    eye = np.eye(class_count, dtype=dtype)
    return np.moveaxis(eye[labels], -1, -3)


def check_depth(depth: np.ndarray, max_range: float | None = None) -> np.ndarray:
    depth = np.asarray(depth)
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth maps must be finite and non-negative")
    if max_range is not None and np.any(depth > max_range):
        raise ValueError(f"depth exceeds max_range {max_range}")
    return depth


@dataclass
class SampleRecord:
    """One training/evaluation unit: centre frame plus its temporal neighbours."""

    image: np.ndarray  # (H, W, 3) in [0, 1], frame t
    prev_image: np.ndarray  # frame t-1
    next_image: np.ndarray  # frame t+1
    sparse: np.ndarray
    gt: np.ndarray
    seg: SegmentationMap
    intrinsics: Intrinsics
    ids: tuple = ()
    photometric_ok: bool = True
    gt_full: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.sparse.shape

    def replace(self, **changes) -> "SampleRecord":
        return replace(self, **changes)
