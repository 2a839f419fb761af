"""Pinhole cameras, SE(3) poses in axis-angle form, and inverse warping.

Pixel convention: homogeneous pixel ``(u, v, 1)`` with ``u`` the column index
and ``v`` the row index, pixel centres on integers. A relative pose
``P_{t->s}`` maps points from camera ``t`` coordinates into camera ``s``
coordinates: ``X_s = R X_t + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .functional import bilinear_sample
from .tensor import Tensor, as_tensor, concat, decision, matmul

_SERIES_BELOW = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def crop(self, x0: int, y0: int, width: int, height: int) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx - x0, self.cy - y0, width, height)

    def flipped(self) -> "Intrinsics":
        """Intrinsics of the horizontally mirrored image."""
        return Intrinsics(self.fx, self.fy, (self.width - 1) - self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for vectors stacked on the last axis."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    small = theta < _SERIES_BELOW
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / t**2)
    da = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (t * np.cos(t) - np.sin(t)) / t**3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (t * np.sin(t) - 2 * (1 - np.cos(t))) / t**4)
    return a, b, da, db


def exp_map(axis_angle) -> np.ndarray:
    """Rotation matrix (or stack of them) from axis-angle vectors."""
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _, _ = _rodrigues_coeffs(theta)
    k = skew(w)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_map(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    r = np.asarray(rotation, dtype=float)
    cos = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return vee / 2
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        m = (r + np.eye(3)) / 2
        axis = m[np.argmax(np.diag(m))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return vee * theta / (2 * np.sin(theta))


def rodrigues(omega: Tensor) -> Tensor:
    """Differentiable exp map for an (N, 3) tensor of axis-angle vectors -> (N, 3, 3)."""
    omega = as_tensor(omega)
    w = omega.data.astype(np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta)
    k = skew(w)
    k2 = k @ k
    rot = np.eye(3) + a[:, None, None] * k + b[:, None, None] * k2
    basis = skew(np.eye(3))  # E_i = [e_i]x, shape (3, 3, 3)

    def backward(g):
        g = g.astype(np.float64)
        # dR/dw_i = a E_i + b (E_i K + K E_i) + (a'/t) w_i K + (b'/t) w_i K^2
        d = (
            a[:, None, None, None] * basis[None]
            + b[:, None, None, None] * (basis[None] @ k[:, None] + k[:, None] @ basis[None])
            + (da[:, None] * w)[:, :, None, None] * k[:, None]
            + (db[:, None] * w)[:, :, None, None] * k2[:, None]
        )
        return (np.einsum("njk,nijk->ni", g, d).astype(omega.dtype),)

    return Tensor._make(rot.astype(omega.dtype), (omega,), backward)


@dataclass
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(log_map(m[:3, :3]), m[:3, 3])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return exp_map(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self`` after ``other``: x -> self(other(x))."""
        return Pose.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "Pose":
        r = self.rotation_matrix
        return Pose(-self.rotation, -r.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points stacked on the last axis."""
        return np.asarray(points) @ self.rotation_matrix.T + self.translation


PoseLike = Union[Pose, Sequence[Pose], np.ndarray, Tensor]
IntrinsicsLike = Union[Intrinsics, Sequence[Intrinsics]]


def pose_tensor(pose: PoseLike, batch: int, dtype=np.float64) -> Tensor:
    """Normalise a pose argument to an (N, 6) tensor."""
    if isinstance(pose, Tensor):
        if pose.shape != (batch, 6):
            raise ValueError(f"pose tensor must be ({batch}, 6), got {pose.shape}")
        return pose
    if isinstance(pose, Pose):
        vec = np.tile(pose.as_vector(), (batch, 1))
    elif isinstance(pose, np.ndarray):
        vec = pose.reshape(-1, 6)
        if vec.shape[0] == 1:
            vec = np.tile(vec, (batch, 1))
    else:
        vec = np.stack([p.as_vector() for p in pose])
    if vec.shape[0] != batch:
        raise ValueError(f"got {vec.shape[0]} poses for a batch of {batch}")
    return Tensor(vec.astype(dtype))


def invert_pose_params(pose: Tensor) -> Tensor:
    """Inverse of (N, 6) axis-angle poses, differentiable."""
    omega = pose[:, :3]
    trans = pose[:, 3:].reshape(-1, 3, 1)
    rot_t = rodrigues(omega).swap_last()
    return concat([-omega, (-matmul(rot_t, trans)).reshape(-1, 3)], axis=1)


def _intrinsics_arrays(k: IntrinsicsLike, batch: int, dtype):
    ks = [k] * batch if isinstance(k, Intrinsics) else list(k)
    if len(ks) != batch:
        raise ValueError(f"got {len(ks)} intrinsics for a batch of {batch}")
    arr = np.array([[i.fx, i.fy, i.cx, i.cy] for i in ks], dtype=dtype)
    return [arr[:, j].reshape(batch, 1, 1, 1) for j in range(4)]


def pixel_grid(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """(2, H, W) array of (u, v) pixel coordinates."""
    v, u = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    return np.stack([u, v])


def backproject(depth: Tensor, k: IntrinsicsLike) -> Tensor:
    """Camera-frame points d(x) K^-1 x~ as an (N, 3, H, W) tensor."""
    depth = as_tensor(depth)
    n, _, h, w = depth.shape
    fx, fy, cx, cy = _intrinsics_arrays(k, n, depth.dtype)
    u, v = pixel_grid(h, w, depth.dtype)
    rays = np.concatenate(
        [(u[None, None] - cx) / fx, (v[None, None] - cy) / fy, np.ones((n, 1, h, w), dtype=depth.dtype)],
        axis=1,
    )
    return depth * rays


def transform_points(points: Tensor, pose: Tensor) -> Tensor:
    """Apply (N, 6) poses to (N, 3, H, W) points."""
    n, _, h, w = points.shape
    rot = rodrigues(pose[:, :3])
    moved = matmul(rot, points.reshape(n, 3, h * w)) + pose[:, 3:].reshape(n, 3, 1)
    return moved.reshape(n, 3, h, w)


def project(points: Tensor, k: IntrinsicsLike, min_depth: float = 1e-6) -> tuple[Tensor, np.ndarray]:
    """Pixel coordinates (N, 2, H, W) of camera-frame points, plus a positive-depth mask."""
    n = points.shape[0]
    fx, fy, cx, cy = _intrinsics_arrays(k, n, points.dtype)
    z = points[:, 2:3]
    ahead = decision(z.data > min_depth).astype(points.dtype)
    z_safe = z * ahead + (1.0 - ahead)
    u = points[:, 0:1] / z_safe * fx + cx
    v = points[:, 1:2] / z_safe * fy + cy
    return concat([u, v], axis=1), ahead


def warp_coords(depth, k: IntrinsicsLike, pose: PoseLike) -> tuple[Tensor, np.ndarray]:
    """Where each frame-t pixel lands in frame s under ``pose`` = P_{t->s}.

    Returns (N, 2, H, W) coordinates and a (N, 1, H, W) mask that is 1 where the
    depth is positive and the reprojected depth is positive.
    """
    depth = as_tensor(depth)
    if depth.ndim == 3:
        depth = depth.reshape(depth.shape[0], 1, *depth.shape[1:])
    n = depth.shape[0]
    pose = pose_tensor(pose, n, depth.dtype)
    moved = transform_points(backproject(depth, k), pose)
    coords, ahead = project(moved, k)
    mask = ahead * (depth.data > 0)
    return coords, mask


def inverse_warp(image, depth, k: IntrinsicsLike, pose: PoseLike) -> tuple[Tensor, np.ndarray]:
    """Sample frame ``s`` image at the frame-t reprojection of every pixel.

    The mask combines depth validity, positive reprojected depth and in-bounds sampling.
    """
    coords, mask = warp_coords(depth, k, pose)
    warped, inside = bilinear_sample(as_tensor(image), coords)
    mask = mask * inside
    return warped * mask, mask
