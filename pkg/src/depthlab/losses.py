"""Training objectives: depth L1 terms, SSIM, photometric reprojection and edge-aware smoothness."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import functional as F
from .geometry import IntrinsicsLike, PoseLike, inverse_warp
from .records import SampleRecord
from .tensor import EmptySupportError, Tensor, as_tensor

__all__ = [
    "Regime", "LossWeights", "LossReport", "LossBatch", "normalized_l1", "weighted_l1", "ssim",
    "photometric_loss", "smoothness_loss", "total_loss", "EmptySupportError",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 3


class Regime(str, enum.Enum):
    SYNTHETIC = "synthetic"
    SUPERVISED = "supervised"
    SELF_SUPERVISED = "self_supervised"
    SEMI_SUPERVISED = "semi_supervised"

    @property
    def photometric(self) -> bool:
        return self in (Regime.SELF_SUPERVISED, Regime.SEMI_SUPERVISED)


@dataclass(frozen=True)
class LossWeights:
    w_depth: float = 0.05
    w_ssim: float = 1.0
    w_co: float = 0.2
    w_sm: float = 0.01

    def __post_init__(self):
        for name in ("w_depth", "w_ssim", "w_co", "w_sm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {"w_depth": self.w_depth, "w_ssim": self.w_ssim, "w_co": self.w_co, "w_sm": self.w_sm}


@dataclass
class LossReport:
    """Total loss plus the value and support size of each active term.

    Terms that were skipped are absent from ``terms`` and listed in ``skipped``.
    """

    total: Tensor
    terms: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def as_log(self) -> dict:
        return {
            "total": float(self.total.data),
            **{k: float(v.data) for k, v in self.terms.items()},
            "counts": dict(self.counts),
            "skipped": list(self.skipped),
        }


def _nchw(x, channels_last: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        if channels_last:
            return Tensor(np.moveaxis(x.data, -1, 0)[None])
        return x.reshape(x.shape[0], 1, *x.shape[1:])
    return x


def _support(gt: np.ndarray, like: Tensor) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=like.dtype).reshape(like.shape)
    return gt, (gt > 0).astype(like.dtype)


def normalized_l1(pred, gt) -> Tensor:
    """Mean over {gt > 0} of |pred - gt| / gt."""
    pred = _nchw(pred)
    gt, mask = _support(gt, pred)
    if not mask.any():
        raise EmptySupportError("normalized_l1: ground truth has no valid pixels")
    safe = np.where(mask > 0, gt, 1.0)
    return F.masked_mean((pred - gt).abs() / safe, mask)


def weighted_l1(pred, gt, w_depth: float = LossWeights.w_depth) -> Tensor:
    """``w_depth`` times the mean over {gt > 0} of |pred - gt|."""
    pred = _nchw(pred)
    gt, mask = _support(gt, pred)
    if not mask.any():
        raise EmptySupportError("weighted_l1: target has no valid pixels")
    return F.masked_mean((pred - gt).abs(), mask) * w_depth


def ssim(a, b, window: int = SSIM_WINDOW) -> Tensor:
    """Per-pixel SSIM of two (N, C, H, W) images, averaged over channels to (N, 1, H, W).

    Window statistics are box averages over a reflect-padded neighbourhood.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("ssim window must be odd")
    p = window // 2

    def box(x: Tensor) -> Tensor:
        return F.avg_pool2d(F.pad2d(x, p, "reflect"), window, stride=1)

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a * mu_a
    var_b = box(b * b) - mu_b * mu_b
    cov = box(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(axis=1, keepdims=True)


def _window_valid(mask: np.ndarray, window: int) -> np.ndarray:
    """Pixels whose whole SSIM window lies inside ``mask``; image borders count as valid."""
    size = (1, 1, window, window)
    return ndimage.minimum_filter(mask, size=size, mode="nearest")


def _photometric_map(warped: Tensor, target: Tensor, weights: LossWeights) -> Tensor:
    l1 = (warped - target).abs().mean(axis=1, keepdims=True)
    return l1 * weights.w_co + (1.0 - ssim(warped, target, SSIM_WINDOW)) * weights.w_ssim


def photometric_loss(
    image_t,
    image_prev,
    image_next,
    depth,
    k: IntrinsicsLike,
    pose_prev: PoseLike,
    pose_next: PoseLike,
    weights: LossWeights = LossWeights(),
    available: np.ndarray | None = None,
    report: dict | None = None,
) -> Tensor:
    """Reprojection loss of the centre frame against its two neighbours.

    ``pose_prev``/``pose_next`` map frame-t camera coordinates into the neighbour
    frames. Each neighbour term is a masked mean over its own validity mask and
    the result averages the terms that have support. ``available`` (N,) marks
    samples whose neighbours may be used. If ``report`` is given it receives the
    per-term pixel counts and the names of skipped terms.
    """
    target = as_tensor(image_t)
    depth = _nchw(depth)
    n = target.shape[0]
    available = np.ones(n, dtype=bool) if available is None else np.asarray(available, dtype=bool)
    terms, info = [], {"counts": {}, "skipped": []}
    for name, image, pose in (("prev", image_prev, pose_prev), ("next", image_next, pose_next)):
        warped, mask = inverse_warp(image, depth, k, pose)
        # invalid samples are zero, so SSIM windows touching them are excluded
        mask = _window_valid(mask, SSIM_WINDOW) * available[:, None, None, None]
        count = int(mask.sum())
        if count == 0:
            info["skipped"].append(f"photometric_{name}")
            continue
        info["counts"][f"photometric_{name}"] = count
        terms.append(F.masked_mean(_photometric_map(warped, target, weights), mask))
    if report is not None:
        report.update(info)
    if not terms:
        raise EmptySupportError("photometric_loss: no neighbour frame has valid reprojections")
    return terms[0] if len(terms) == 1 else (terms[0] + terms[1]) * 0.5


def smoothness_loss(depth, image, w_sm: float = LossWeights.w_sm) -> Tensor:
    """Edge-aware first-order smoothness on the (H-1, W-1) interior."""
    d = _nchw(depth)
    img = as_tensor(image)
    dx = (d[:, :, :-1, 1:] - d[:, :, :-1, :-1]).abs()
    dy = (d[:, :, 1:, :-1] - d[:, :, :-1, :-1]).abs()
    ix = np.abs(img.data[:, :, :-1, 1:] - img.data[:, :, :-1, :-1]).mean(axis=1, keepdims=True)
    iy = np.abs(img.data[:, :, 1:, :-1] - img.data[:, :, :-1, :-1]).mean(axis=1, keepdims=True)
    wx = np.exp(-ix).astype(d.dtype)
    wy = np.exp(-iy).astype(d.dtype)
    return (dx * wx + dy * wy).mean() * w_sm


@dataclass
class LossBatch:
    """Batched targets in channel-first layout, built from sample records."""

    image: np.ndarray  # (N, 3, H, W)
    prev_image: np.ndarray
    next_image: np.ndarray
    sparse: np.ndarray  # (N, H, W)
    gt: np.ndarray
    intrinsics: list
    photometric_ok: np.ndarray  # (N,) bool

    @classmethod
    def from_records(cls, records: list[SampleRecord], dtype=np.float32) -> "LossBatch":
        def stack_images(attr):
            return np.stack([np.moveaxis(getattr(r, attr), -1, 0) for r in records]).astype(dtype)

        return cls(
            image=stack_images("image"),
            prev_image=stack_images("prev_image"),
            next_image=stack_images("next_image"),
            sparse=np.stack([r.sparse for r in records]).astype(dtype),
            gt=np.stack([r.gt for r in records]).astype(dtype),
            intrinsics=[r.intrinsics for r in records],
            photometric_ok=np.array([r.photometric_ok for r in records], dtype=bool),
        )


def total_loss(
    batch: LossBatch,
    depth: Tensor,
    regime: Regime | str,
    weights: LossWeights = LossWeights(),
    pose_prev: Tensor | None = None,
    pose_next: Tensor | None = None,
) -> LossReport:
    """Combine the terms each training regime uses.

    synthetic: normalized L1 against dense ground truth.
    supervised: weighted L1 against ground truth.
    self_supervised: weighted L1 against the sparse input, photometric, smoothness.
    semi_supervised: weighted L1 against ground truth, photometric, smoothness.
    """
    regime = Regime(regime)
    depth = _nchw(depth)
    terms, counts, skipped = {}, {}, []
    if regime is Regime.SYNTHETIC:
        terms["depth"] = normalized_l1(depth, batch.gt)
        counts["depth"] = int((batch.gt > 0).sum())
    else:
        target = batch.sparse if regime is Regime.SELF_SUPERVISED else batch.gt
        terms["depth"] = weighted_l1(depth, target, weights.w_depth)
        counts["depth"] = int((target > 0).sum())
    if regime.photometric:
        if pose_prev is None or pose_next is None:
            raise ValueError(f"regime {regime.value} needs predicted poses")
        info: dict = {}
        try:
            terms["photometric"] = photometric_loss(
                batch.image, batch.prev_image, batch.next_image, depth, batch.intrinsics,
                pose_prev, pose_next, weights, available=batch.photometric_ok, report=info,
            )
        except EmptySupportError:
            skipped.append("photometric")
        counts.update(info.get("counts", {}))
        skipped.extend(info.get("skipped", []))
        terms["smoothness"] = smoothness_loss(depth, batch.image, weights.w_sm)
        counts["smoothness"] = int(depth.size)
    total = None
    for value in terms.values():
        total = value if total is None else total + value
    return LossReport(total=total, terms=terms, counts=counts, skipped=skipped)
