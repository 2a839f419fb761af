"""Non-learned front end: outlier filtering, pyramid max-pool densification, augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .records import SampleRecord, SegmentationMap

DEFAULT_SCALES = (5, 7, 9, 11)


def outlier_filter(sparse: np.ndarray, window: int = 7, margin_m: float = 1.5) -> np.ndarray:
    """Drop returns lying more than ``margin_m`` behind the nearest return in their window.

    Works on (H, W) maps or (N, H, W) stacks. The window shrinks at the border
    and every decision is taken against the unfiltered input.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if margin_m <= 0:
        raise ValueError("margin_m must be positive")
    sparse = np.asarray(sparse)
    valid = sparse > 0
    if not valid.any():
        return sparse.copy()
    masked = np.where(valid, sparse, np.inf)
    size = (window, window) if sparse.ndim == 2 else (1,) * (sparse.ndim - 2) + (window, window)
    local_min = ndimage.minimum_filter(masked, size=size, mode="constant", cval=np.inf)
    keep = valid & (sparse <= local_min + margin_m)
    return np.where(keep, sparse, 0).astype(sparse.dtype)


@dataclass
class SppStack:
    """The raw map followed by one max-pooled copy per kernel size."""

    scales: tuple
    maps: list

    def as_array(self) -> np.ndarray:
        """Stack maps on a channel axis: (1+S, H, W) or (N, 1+S, H, W)."""
        return np.stack(self.maps, axis=-3)


def _check_scales(scales: Sequence[int]) -> tuple:
    scales = tuple(int(k) for k in scales)
    if any(k % 2 == 0 or k < 1 for k in scales):
        raise ValueError(f"SPP scales must be odd, got {scales}")
    if list(scales) != sorted(set(scales)):
        raise ValueError(f"SPP scales must be strictly ascending, got {scales}")
    return scales


def spp_densify(filtered: np.ndarray, scales: Sequence[int] = DEFAULT_SCALES) -> SppStack:
    """Stride-1, same-size max pooling of a depth map at several kernel sizes."""
    scales = _check_scales(scales)
    depth = np.asarray(filtered)
    lead = (1,) * (depth.ndim - 2)
    maps = [depth.copy()]
    for k in scales:
        # constant -inf padding: border windows only see in-frame pixels
        maps.append(ndimage.maximum_filter(depth, size=lead + (k, k), mode="constant", cval=-np.inf))
    return SppStack(scales, maps)


def _flip_crop(arr: np.ndarray, y0: int, x0: int, h: int, w: int, flip: bool) -> np.ndarray:
    out = arr[y0 : y0 + h, x0 : x0 + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def crop_and_flip(sample: SampleRecord, y0: int, x0: int, crop_h: int, crop_w: int, flip: bool) -> SampleRecord:
    h, w = sample.shape
    if crop_h > h or crop_w > w or y0 < 0 or x0 < 0 or y0 + crop_h > h or x0 + crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} at ({y0}, {x0}) does not fit a {h}x{w} frame")
    fc = lambda a: None if a is None else _flip_crop(a, y0, x0, crop_h, crop_w, flip)  # noqa: E731
    k = sample.intrinsics.crop(x0, y0, crop_w, crop_h)
    if flip:
        k = k.flipped()
    return sample.replace(
        image=fc(sample.image),
        prev_image=fc(sample.prev_image),
        next_image=fc(sample.next_image),
        sparse=fc(sample.sparse),
        gt=fc(sample.gt),
        gt_full=fc(sample.gt_full),
        seg=SegmentationMap(fc(sample.seg.labels), sample.seg.class_count),
        intrinsics=k,
        extras={**sample.extras, "flipped": bool(flip) ^ bool(sample.extras.get("flipped", False))},
    )


def augment(sample: SampleRecord, flip_prob: float, crop_h: int, crop_w: int, rng_seed) -> SampleRecord:
    """Random crop plus random horizontal flip, applied identically to every raster."""
    h, w = sample.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than frame {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    flip = bool(rng.random() < flip_prob)
    return crop_and_flip(sample, y0, x0, crop_h, crop_w, flip)


def bottom_crop(sample: SampleRecord, crop_h: int, crop_w: int) -> SampleRecord:
    """Keep the bottom ``crop_h`` rows and the horizontally centred ``crop_w`` columns."""
    h, w = sample.shape
    return crop_and_flip(sample, h - crop_h, (w - crop_w) // 2, crop_h, crop_w, False)
