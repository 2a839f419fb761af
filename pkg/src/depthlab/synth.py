"""Procedural street scenes rendered by ray casting, plus LiDAR-style sparsification.

World frame: x right, y down, z forward; the ground is the plane ``y = ground_y``.
Camera poses are camera-to-world transforms. Depth is the hit distance along the
optical axis (the camera-frame z of the hit point).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import Intrinsics, Pose
from .records import SampleRecord, SegmentationMap

CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vehicle", "pole")
SKY, ROAD, SIDEWALK, BUILDING, VEHICLE, POLE = range(len(CLASS_NAMES))

DEFAULT_HEIGHT, DEFAULT_WIDTH = 96, 320
LIGHT_DIR = np.array([0.35, -0.8, -0.45]) / np.linalg.norm([0.35, -0.8, -0.45])


def default_intrinsics(height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> Intrinsics:
    f = 0.58 * width
    return Intrinsics(f, f, (width - 1) / 2, 0.46 * height, width, height)


@dataclass
class Texture:
    """Sum of a few plane waves on a surface, modulating a base colour."""

    base: np.ndarray
    freqs: np.ndarray  # (K, 2) spatial angular frequency in rad/m
    phases: np.ndarray
    amps: np.ndarray

    @classmethod
    def random(cls, seed: int, base, min_wavelength: float = 0.8, max_wavelength: float = 4.0) -> "Texture":
        rng = np.random.default_rng(seed)
        k = 4
        wavelengths = rng.uniform(min_wavelength, max_wavelength, k)
        angles = rng.uniform(0, np.pi, k)
        freqs = (2 * np.pi / wavelengths)[:, None] * np.stack([np.cos(angles), np.sin(angles)], 1)
        base = np.clip(np.asarray(base, dtype=float) * rng.uniform(0.85, 1.15, 3), 0.05, 0.95)
        return cls(base, freqs, rng.uniform(0, 2 * np.pi, k), rng.uniform(0.5, 1.0, k))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        wave = np.zeros_like(a)
        for (fa, fb), ph, amp in zip(self.freqs, self.phases, self.amps):
            wave += amp * np.sin(fa * a + fb * b + ph)
        pattern = 0.5 + 0.5 * wave / self.amps.sum()
        return self.base[None, :] * (0.55 + 0.45 * pattern[:, None])


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    class_id: int
    texture_seed: int

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("box extents must be positive")


_CLASS_COLOURS = {
    ROAD: (0.35, 0.35, 0.38),
    SIDEWALK: (0.6, 0.55, 0.5),
    BUILDING: (0.7, 0.5, 0.4),
    VEHICLE: (0.2, 0.3, 0.7),
    POLE: (0.5, 0.5, 0.5),
}


@dataclass
class Scene:
    intrinsics: Intrinsics
    ground_y: float = 1.6
    road_half_width: float = 4.0
    boxes: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)  # camera-to-world Poses
    max_range: float = 80.0
    class_count: int = len(CLASS_NAMES)
    seed: int = 0

    def validate(self) -> None:
        for box in self.boxes:
            if not 0 <= box.class_id < self.class_count:
                raise ValueError(f"box class {box.class_id} outside [0, {self.class_count})")
        zs = [p.translation[2] for p in self.trajectory]
        if zs and self.boxes:
            nearest = min(b.lo[2] for b in self.boxes)
            if nearest < max(zs) + 0.5:
                raise ValueError("every box must lie at least 0.5 m ahead of all cameras")

    def relative_pose(self, src: int, dst: int) -> Pose:
        """P_{src->dst}: maps camera-src coordinates into camera-dst coordinates."""
        return self.trajectory[dst].inverse().compose(self.trajectory[src])


def _textures(scene: Scene) -> dict:
    cache = getattr(scene, "_texture_cache", None)
    if cache is None:
        cache = {"ground_road": Texture.random(scene.seed * 7919 + 1, _CLASS_COLOURS[ROAD], 1.0, 5.0),
                 "ground_side": Texture.random(scene.seed * 7919 + 2, _CLASS_COLOURS[SIDEWALK], 1.0, 5.0)}
        for i, box in enumerate(scene.boxes):
            cache[i] = Texture.random(box.texture_seed, _CLASS_COLOURS[box.class_id])
        scene._texture_cache = cache
    return cache


def _sky_colour(dirs: np.ndarray) -> np.ndarray:
    elevation = np.arcsin(np.clip(-dirs[:, 1], -1, 1))
    azimuth = np.arctan2(dirs[:, 0], dirs[:, 2])
    t = np.clip(elevation / 0.6, 0, 1)[:, None]
    colour = (1 - t) * np.array([0.75, 0.82, 0.9]) + t * np.array([0.35, 0.5, 0.8])
    clouds = 0.06 * np.sin(5 * azimuth + 1.3) * np.sin(9 * elevation + 0.4)
    return np.clip(colour + clouds[:, None], 0, 1)


def _raycast(scene: Scene, cam: Pose, rays_cam: np.ndarray):
    """Colour, camera depth (inf for sky) and class label for (M, 3) camera rays with z == 1."""
    r_wc = cam.rotation_matrix
    dirs = rays_cam @ r_wc.T  # camera z == 1 so the ray parameter is the camera depth
    origin = cam.translation
    n = dirs.shape[0]

    best = np.full(n, np.inf)
    label = np.full(n, SKY, dtype=np.int64)
    colour = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    source = np.full(n, -1, dtype=np.int64)  # -2 ground, >=0 box index

    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = (scene.ground_y - origin[1]) / dirs[:, 1]
    hit = (dirs[:, 1] > 1e-9) & (s_ground > 0) & (s_ground < best)
    best[hit] = s_ground[hit]
    source[hit] = -2
    normal[hit] = (0.0, -1.0, 0.0)

    for i, box in enumerate(scene.boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lo - origin) / dirs
            t2 = (box.hi - origin) / dirs
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = (near <= far) & (near > 0) & (near < best)
        if not hit.any():
            continue
        axis = tmin[hit].argmax(axis=1)
        best[hit] = near[hit]
        source[hit] = i
        nrm = np.zeros((hit.sum(), 3))
        nrm[np.arange(len(axis)), axis] = -np.sign(dirs[hit][np.arange(len(axis)), axis])
        normal[hit] = nrm

    far_away = best > scene.max_range
    source[far_away] = -1
    best[far_away] = np.inf

    points = origin[None, :] + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    textures = _textures(scene)
    ground = source == -2
    if ground.any():
        px, pz = points[ground, 0], points[ground, 2]
        on_road = np.abs(px) <= scene.road_half_width
        label[ground] = np.where(on_road, ROAD, SIDEWALK)
        colour[ground] = np.where(on_road[:, None], textures["ground_road"](px, pz), textures["ground_side"](px, pz))
    for i, box in enumerate(scene.boxes):
        sel = source == i
        if not sel.any():
            continue
        p = points[sel]
        ax = np.abs(normal[sel]).argmax(axis=1)
        # surface coordinates: the two world axes spanning the hit face
        a = np.where(ax == 0, p[:, 2], p[:, 0])
        b = np.where(ax == 1, p[:, 2], p[:, 1])
        label[sel] = box.class_id
        colour[sel] = textures[i](a + 0.37 * ax, b - 0.21 * ax)
    surf = source != -1
    shade = 0.45 + 0.55 * np.clip(normal @ LIGHT_DIR, 0, 1)
    colour[surf] *= shade[surf, None]
    colour[~surf] = _sky_colour(dirs[~surf] / np.linalg.norm(dirs[~surf], axis=1, keepdims=True))
    return colour, best, label


def _camera_rays(k: Intrinsics, offsets: np.ndarray) -> np.ndarray:
    """(H, W, S, 3) rays through pixel centres shifted by ``offsets`` (S, 2) in pixels."""
    v, u = np.meshgrid(np.arange(k.height, dtype=float), np.arange(k.width, dtype=float), indexing="ij")
    uu = u[..., None] + offsets[:, 0]
    vv = v[..., None] + offsets[:, 1]
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], -1)


def render(scene: Scene, pose_index: int, supersample: int = 2, blur_sigma: float = 0.5):
    """Ray-cast one frame. Returns (image HxWx3, depth HxW, SegmentationMap).

    Colour integrates ``supersample``^2 rays per pixel and then a Gaussian
    point-spread of ``blur_sigma`` pixels; depth and labels come from the
    single ray through each pixel centre.
    """
    k = scene.intrinsics
    h, w = k.height, k.width
    cam = scene.trajectory[pose_index]
    _, best, label = _raycast(scene, cam, _camera_rays(k, np.zeros((1, 2))).reshape(-1, 3))
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    offsets = np.stack(np.meshgrid(sub, sub, indexing="xy"), -1).reshape(-1, 2)
    colour, _, _ = _raycast(scene, cam, _camera_rays(k, offsets).reshape(-1, 3))
    image = colour.reshape(h, w, len(offsets), 3).mean(axis=2)
    if blur_sigma > 0:
        image = ndimage.gaussian_filter(image, (blur_sigma, blur_sigma, 0), mode="nearest")

    depth = np.where(np.isfinite(best), best, scene.max_range).reshape(h, w)
    image = np.clip(image, 0, 1)
    return image, depth, SegmentationMap(label.reshape(h, w), scene.class_count)


def random_scene(seed: int, intrinsics: Intrinsics | None = None, n_frames: int = 3,
                 step_m: tuple = (0.3, 0.5), max_range: float = 80.0) -> Scene:
    """A street canyon: road, sidewalks, buildings on both sides, a closing wall, cars and poles."""
    # frame spacing of a 10 Hz camera at urban speed; longer baselines add occlusion residual
    rng = np.random.default_rng(seed)
    k = intrinsics or default_intrinsics()
    ground_y = 1.6
    road = rng.uniform(3.5, 4.5)
    sidewalk = rng.uniform(1.5, 2.5)

    trajectory = []
    z = 0.0
    yaw = rng.uniform(-0.03, 0.03)
    lateral = rng.uniform(-0.8, 0.8)
    step = rng.uniform(*step_m)
    for _ in range(n_frames):
        trajectory.append(Pose([0.0, yaw, 0.0], [lateral, 0.0, z]))
        z += step * rng.uniform(0.9, 1.1)
        yaw += rng.normal(0, 0.01)
        lateral += rng.normal(0, 0.05)
    z_cam = max(p.translation[2] for p in trajectory)
    z0 = z_cam + 0.5

    boxes = []
    end_z = rng.uniform(28.0, 40.0)
    for side in (-1, 1):
        zc = z0 + rng.uniform(0.0, 3.0)
        while zc < end_z:
            length = rng.uniform(5.0, 14.0)
            setback = rng.uniform(0.0, 1.5)
            inner = road + sidewalk + setback
            height = rng.uniform(5.0, 16.0)
            depth = rng.uniform(6.0, 12.0)
            x_lo, x_hi = (inner, inner + depth) if side > 0 else (-inner - depth, -inner)
            boxes.append(Box([x_lo, ground_y - height, zc], [x_hi, ground_y, min(zc + length, end_z)],
                             BUILDING, int(rng.integers(1 << 30))))
            zc += length + (rng.uniform(0.5, 4.0) if rng.random() < 0.4 else 0.0)
    wall_h = rng.uniform(6.0, 18.0)
    boxes.append(Box([-40.0, ground_y - wall_h, end_z], [40.0, ground_y, end_z + 3.0],
                     BUILDING, int(rng.integers(1 << 30))))
    for _ in range(int(rng.integers(1, 5))):
        side = rng.choice([-1, 1])
        x = side * rng.uniform(road - 2.6, road - 1.0)
        zc = rng.uniform(z0 + 3.0, end_z - 5.0)
        hh = rng.uniform(1.3, 1.8)
        boxes.append(Box([x - 0.9, ground_y - hh, zc], [x + 0.9, ground_y, zc + 4.0],
                         VEHICLE, int(rng.integers(1 << 30))))
    for _ in range(int(rng.integers(0, 4))):
        side = rng.choice([-1, 1])
        x = side * (road + 0.4)
        zc = rng.uniform(z0 + 2.0, end_z - 2.0)
        boxes.append(Box([x - 0.12, ground_y - rng.uniform(4.0, 7.0), zc], [x + 0.12, ground_y, zc + 0.24],
                         POLE, int(rng.integers(1 << 30))))

    scene = Scene(k, ground_y, road, boxes, trajectory, max_range, len(CLASS_NAMES), seed)
    scene.validate()
    return scene


# -- sparsification ----------------------------------------------------------

@dataclass
class ScanPattern:
    mask: np.ndarray
    nominal_density: float

    @property
    def density(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def scan_pattern_lidar_like(height: int, width: int, num_lines: int, horizontal_step: int,
                            seed: int = 0, density_exponent: float = 1.5) -> ScanPattern:
    """Horizontal scan lines below the top third, packed more tightly towards the bottom.

    Each line samples every ``horizontal_step`` pixels starting from a random phase.
    """
    if horizontal_step < 1:
        raise ValueError("horizontal_step must be >= 1")
    mask = np.zeros((height, width), dtype=bool)
    top = -(-height // 3)  # first row below the upper third
    rows_available = height - top
    num_lines = min(int(num_lines), rows_available)
    if num_lines <= 0:
        return ScanPattern(mask, 0.0)
    frac = np.linspace(0.0, 1.0, num_lines) if num_lines > 1 else np.zeros(1)
    ideal = (height - 1) - (rows_available - 1) * frac**density_exponent
    rows = []
    for r in np.round(ideal).astype(int):
        r = min(r, rows[-1] - 1) if rows else r
        rows.append(r)
    rows = [r for r in rows if r >= top]
    rng = np.random.default_rng(seed)
    for r in rows:
        phase = int(rng.integers(0, horizontal_step))
        mask[r, phase::horizontal_step] = True
    nominal = num_lines / (height * horizontal_step)
    return ScanPattern(mask, nominal)


def sparsify(dense: np.ndarray, pattern: ScanPattern, dropout: float = 0.0, noise_sigma_m: float = 0.0,
             rng_seed=0, outlier_fraction: float = 0.0, max_range: float | None = None,
             return_outliers: bool = False):
    """Sample ``dense`` under a scan pattern with random dropout, range noise and outliers.

    Pixels at or beyond ``max_range`` (sky) never produce returns.
    """
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must lie in [0, 1)")
    dense = np.asarray(dense)
    rng = np.random.default_rng(rng_seed)
    valid = dense > 0
    if max_range is not None:
        valid &= dense < max_range
    keep = pattern.mask & valid
    if dropout > 0:
        keep &= rng.random(dense.shape) >= dropout
    out = np.where(keep, dense, 0.0)
    if noise_sigma_m > 0:
        noisy = out + rng.normal(0.0, noise_sigma_m, dense.shape)
        out = np.where(keep, np.maximum(noisy, 0.0), 0.0)
    outliers = np.zeros(dense.shape, dtype=bool)
    if outlier_fraction > 0:
        outliers = keep & (rng.random(dense.shape) < outlier_fraction)
        out = np.where(outliers, out + rng.uniform(2.0, 10.0, dense.shape), out)
    out = out.astype(dense.dtype)
    return (out, outliers) if return_outliers else out


def remap_classes(seg: SegmentationMap, mapping: dict, class_count: int | None = None) -> SegmentationMap:
    """Relabel class ids through ``mapping``; every occurring id must be mapped."""
    present = np.unique(seg.labels)
    missing = [int(c) for c in present if int(c) not in mapping]
    if missing:
        raise KeyError(f"unmapped class ids: {missing}")
    lut = np.zeros(int(max(max(mapping), present.max())) + 1, dtype=np.int64)
    for old, new in mapping.items():
        lut[old] = new
    count = class_count if class_count is not None else int(max(mapping.values())) + 1
    return SegmentationMap(lut[seg.labels], count)


def mask_gt_region(gt: np.ndarray, top_fraction: float) -> np.ndarray:
    """Zero the top ``top_fraction`` of rows, as for LiDAR ground truth with an unlabeled band."""
    if not 0.0 <= top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in [0, 1]")
    out = np.array(gt, copy=True)
    rows = int(round(top_fraction * out.shape[-2]))
    out[..., :rows, :] = 0
    return out


@dataclass
class SparsifyConfig:
    num_lines: int = 24
    horizontal_step: int = 4
    dropout: float = 0.1
    noise_sigma_m: float = 0.02
    outlier_fraction: float = 0.01
    gt_top_mask: float = 0.0


def scene_samples(scene: Scene, config: SparsifyConfig | None = None, seed: int = 0,
                  centre_only: bool = False, sequence: int | None = None) -> list:
    """SampleRecords for every frame of a rendered scene (boundary frames flagged).

    Frame ids use ``sequence`` (default: the scene seed) as the sequence number.
    """
    config = config or SparsifyConfig()
    seq = scene.seed if sequence is None else sequence
    k = scene.intrinsics
    renders = [render(scene, i) for i in range(len(scene.trajectory))]
    samples = []
    frames = range(len(renders))
    if centre_only:
        frames = [len(renders) // 2]
    for i in frames:
        image, depth, seg = renders[i]
        pattern = scan_pattern_lidar_like(k.height, k.width, config.num_lines, config.horizontal_step,
                                          seed=seed * 1000 + i)
        sparse = sparsify(depth, pattern, config.dropout, config.noise_sigma_m, seed * 1000 + i,
                          config.outlier_fraction, scene.max_range).astype(np.float32)
        prev_ok, next_ok = i > 0, i + 1 < len(renders)
        samples.append(SampleRecord(
            image=image.astype(np.float32),
            prev_image=renders[i - 1][0].astype(np.float32) if prev_ok else image.astype(np.float32),
            next_image=renders[i + 1][0].astype(np.float32) if next_ok else image.astype(np.float32),
            sparse=sparse,
            gt=mask_gt_region(depth, config.gt_top_mask).astype(np.float32),
            seg=seg,
            intrinsics=k,
            ids=(f"{seq:04d}_{i - 1:06d}" if prev_ok else None, f"{seq:04d}_{i:06d}",
                 f"{seq:04d}_{i + 1:06d}" if next_ok else None),
            photometric_ok=prev_ok and next_ok,
            gt_full=depth.astype(np.float32),
            extras={"pose_prev": scene.relative_pose(i, i - 1) if prev_ok else None,
                    "pose_next": scene.relative_pose(i, i + 1) if next_ok else None},
        ))
    return samples


def make_samples(seeds: Sequence[int], config: SparsifyConfig | None = None,
                 intrinsics: Intrinsics | None = None, n_frames: int = 3, max_range: float = 80.0) -> list:
    """Centre-frame samples of one fresh scene per seed."""
    out = []
    for s in seeds:
        scene = random_scene(int(s), intrinsics, n_frames, max_range=max_range)
        out.extend(scene_samples(scene, config, seed=int(s), centre_only=True))
    return out
