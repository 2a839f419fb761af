"""On-disk datasets: netpbm rasters, a JSON manifest, and batch assembly into SampleRecords.

Layout under a dataset root::

    manifest.json
    images/<id>.ppm      8-bit RGB, every frame including neighbours
    sparse/<id>.pgm      16-bit depth, value = round(m * 256), 0 = missing
    gt/<id>.pgm          16-bit depth, possibly region-masked
    gt_full/<id>.pgm     optional unmasked depth (synthetic data only)
    seg/<id>.pgm         8-bit class ids

Frame ids are ``<sequence:04d>_<frame:06d>``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Intrinsics
from .nn import atomic_write
from .preprocess import augment
from .records import SampleRecord, SegmentationMap
from .synth import CLASS_NAMES, SparsifyConfig, default_intrinsics, random_scene, scene_samples

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEPTH_SCALE = 256.0
MAX_DEPTH_M = 65535 / DEPTH_SCALE
MODALITIES = ("image", "sparse", "gt", "seg")
OPTIONAL_MODALITIES = ("gt_full",)
SUBDIRS = {"image": "images", "sparse": "sparse", "gt": "gt", "gt_full": "gt_full", "seg": "seg"}


class DatasetFormatError(ValueError):
    pass


def frame_id(sequence: int, frame: int) -> str:
    return f"{sequence:04d}_{frame:06d}"


# -- netpbm ------------------------------------------------------------------

def _write_pnm(path, magic: bytes, array: np.ndarray, maxval: int) -> None:
    h, w = array.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    atomic_write(str(path), header + np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_pnm(path, magic: bytes) -> tuple[np.ndarray, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise DatasetFormatError(f"{path}: truncated header")
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if fields[0] != magic:
        raise DatasetFormatError(f"{path}: expected {magic.decode()} file, found {fields[0][:2]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    if len(raw) - pos < count * np.dtype(dtype).itemsize:
        raise DatasetFormatError(f"{path}: raster shorter than {w}x{h}x{channels}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape), maxval


def write_depth(path, depth: np.ndarray) -> None:
    """16-bit PGM with value round(depth * 256); 0 marks a missing pixel."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got {depth.shape}")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite and non-negative")
    if depth.max(initial=0.0) > MAX_DEPTH_M:
        raise ValueError(f"depth {depth.max():.3f} m exceeds the encodable {MAX_DEPTH_M:.3f} m")
    _write_pnm(path, b"P5", np.round(depth * DEPTH_SCALE).astype(np.uint16), 65535)


def read_depth(path) -> np.ndarray:
    raw, maxval = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise DatasetFormatError(f"{path}: depth maps need maxval 65535, found {maxval}")
    return (raw.astype(np.float32) / DEPTH_SCALE).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {image.shape}")
    _write_pnm(path, b"P6", np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), 255)


def read_image(path) -> np.ndarray:
    raw, maxval = _read_pnm(path, b"P6")
    if maxval != 255:
        raise DatasetFormatError(f"{path}: images need maxval 255, found {maxval}")
    return raw.astype(np.float32) / 255.0


def write_seg(path, seg: SegmentationMap) -> None:
    if seg.class_count > 256:
        raise ValueError("8-bit segmentation files hold at most 256 classes")
    _write_pnm(path, b"P5", seg.labels.astype(np.uint8), 255)


def read_seg(path, class_count: int) -> SegmentationMap:
    raw, maxval = _read_pnm(path, b"P5")
    if maxval > 255:
        raise DatasetFormatError(f"{path}: segmentation must be 8-bit")
    if raw.size and raw.max() >= class_count:
        raise DatasetFormatError(f"{path}: class id {raw.max()} >= class_count {class_count}")
    return SegmentationMap(raw.astype(np.int64), class_count)


# -- manifest ----------------------------------------------------------------

@dataclass
class Manifest:
    """Sample entries plus an image table for every frame (neighbours included).

    Each entry holds ``id``, ``split``, ``intrinsics``, relative paths per
    modality, and ``prev``/``next`` frame ids (None at sequence boundaries).
    """

    root: str
    samples: list = field(default_factory=list)
    frames: dict = field(default_factory=dict)
    class_count: int = len(CLASS_NAMES)
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))
    format_version: int = MANIFEST_VERSION

    def validate(self, check_files: bool = True) -> None:
        ids = [e["id"] for e in self.samples]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DatasetFormatError(f"duplicate sample ids: {dupes[:5]}")
        splits = {e.get("split") for e in self.samples}
        if not splits <= {"train", "val"}:
            raise DatasetFormatError(f"unknown split tags {sorted(splits - {'train', 'val'})}")
        if len(self.class_names) != self.class_count:
            raise DatasetFormatError("class_names length differs from class_count")
        if not check_files:
            return
        for path in self._paths():
            if not (Path(self.root) / path).is_file():
                raise DatasetFormatError(f"manifest references missing file {path}")

    def _paths(self):
        for e in self.samples:
            for m in MODALITIES + OPTIONAL_MODALITIES:
                if e.get(m):
                    yield e[m]
        yield from self.frames.values()

    def split(self, name: str) -> list:
        return [e for e in self.samples if e["split"] == name]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "class_count": self.class_count,
            "class_names": list(self.class_names),
            "frames": dict(sorted(self.frames.items())),
            "samples": self.samples,
        }

    def save(self) -> None:
        text = json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"
        atomic_write(os.path.join(self.root, "manifest.json"), text.encode())

    @classmethod
    def load(cls, root) -> "Manifest":
        path = Path(root) / "manifest.json"
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"cannot read manifest {path}: {exc}") from exc
        if data.get("format_version") != MANIFEST_VERSION:
            raise DatasetFormatError(f"{path}: unsupported manifest version {data.get('format_version')}")
        manifest = cls(str(root), data["samples"], data.get("frames", {}), data["class_count"],
                       data["class_names"], data["format_version"])
        manifest.validate()
        return manifest


def match_intersection(a: Manifest, b: Manifest, required: Sequence[str] = MODALITIES) -> tuple[Manifest, dict]:
    """Inner join of two manifests on sample id, merging their modalities.

    Both manifests must share a root. Returns the joined manifest and a drop
    report listing ids present on one side only and ids that still miss a
    required modality after the merge.
    """
    for m in (a, b):
        ids = [e["id"] for e in m.samples]
        if len(ids) != len(set(ids)):
            raise DatasetFormatError(f"duplicate sample ids in manifest rooted at {m.root}")
    if os.path.abspath(a.root) != os.path.abspath(b.root):
        raise DatasetFormatError("match_intersection needs manifests with a common root")
    if a.class_count != b.class_count and a.class_count and b.class_count:
        logger.warning("class counts differ (%d vs %d); keeping the second", a.class_count, b.class_count)
    by_b = {e["id"]: e for e in b.samples}
    ids_a = {e["id"] for e in a.samples}
    report = {
        "only_a": sorted(ids_a - set(by_b)),
        "only_b": sorted(set(by_b) - ids_a),
        "incomplete": [],
    }
    merged = []
    for e in a.samples:
        if e["id"] not in by_b:
            continue
        joined = {**e, **{k: v for k, v in by_b[e["id"]].items() if v is not None}}
        if any(not joined.get(m) for m in required):
            report["incomplete"].append(e["id"])
            continue
        merged.append(joined)
    report["incomplete"].sort()
    out = Manifest(a.root, merged, {**a.frames, **b.frames}, b.class_count, list(b.class_names))
    return out, report


# -- batches -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop: tuple | None = None  # (h, w); None keeps the full frame
    seed: int = 0


def _load_record(manifest: Manifest, entry: dict) -> SampleRecord:
    root = Path(manifest.root)
    image = read_image(root / entry["image"])

    def neighbour(key):
        fid = entry.get(key)
        if fid is None or fid not in manifest.frames:
            return image, False
        return read_image(root / manifest.frames[fid]), True

    prev_image, prev_ok = neighbour("prev")
    next_image, next_ok = neighbour("next")
    gt_full = read_depth(root / entry["gt_full"]) if entry.get("gt_full") else None
    return SampleRecord(
        image=image,
        prev_image=prev_image,
        next_image=next_image,
        sparse=read_depth(root / entry["sparse"]),
        gt=read_depth(root / entry["gt"]),
        seg=read_seg(root / entry["seg"], manifest.class_count),
        intrinsics=Intrinsics.from_dict(entry["intrinsics"]),
        ids=(entry.get("prev"), entry["id"], entry.get("next")),
        photometric_ok=prev_ok and next_ok,
        gt_full=gt_full,
    )


def load_batch(manifest: Manifest, split: str, indices: Sequence[int], augment_config: AugmentConfig | None = None,
               epoch: int = 0) -> list:
    """Read samples ``indices`` of ``split``; augmentation is seeded by (seed, epoch, index).

    A missing neighbour frame is replaced by the centre frame and the sample's
    photometric terms are flagged as skipped.
    """
    entries = manifest.split(split)
    out = []
    for i in indices:
        record = _load_record(manifest, entries[int(i)])
        if augment_config is not None:
            crop_h, crop_w = augment_config.crop or record.shape
            record = augment(record, augment_config.flip_prob, crop_h, crop_w,
                             (augment_config.seed, epoch, int(i)))
        out.append(record)
    return out


# -- generation --------------------------------------------------------------

def write_record(root, record: SampleRecord, split: str, neighbours: dict) -> dict:
    """Write one centre sample plus its neighbour images; returns the manifest entry."""
    root = Path(root)
    sid = record.ids[1]
    entry = {"id": sid, "split": split, "intrinsics": record.intrinsics.to_dict(),
             "prev": record.ids[0], "next": record.ids[2]}
    for sub in SUBDIRS.values():
        (root / sub).mkdir(parents=True, exist_ok=True)
    for modality in MODALITIES + OPTIONAL_MODALITIES:
        ext = ".ppm" if modality == "image" else ".pgm"
        rel = f"{SUBDIRS[modality]}/{sid}{ext}"
        if modality == "image":
            write_image(root / rel, record.image)
        elif modality == "seg":
            write_seg(root / rel, record.seg)
        elif modality == "gt_full":
            if record.gt_full is None:
                continue
            write_depth(root / rel, record.gt_full)
        else:
            write_depth(root / rel, getattr(record, modality))
        entry[modality] = rel
    neighbours[sid] = entry["image"]
    for fid, image in ((record.ids[0], record.prev_image), (record.ids[2], record.next_image)):
        if fid is not None:
            rel = f"images/{fid}.ppm"
            write_image(root / rel, image)
            neighbours[fid] = rel
    return entry


def generate_dataset(root, n_train: int, n_val: int, seed: int = 0, height: int = 96, width: int = 320,
                     sparsify: SparsifyConfig | None = None, n_frames: int = 3) -> Manifest:
    """Render ``n_train + n_val`` scenes and write their centre frames as a dataset.

    Scene ``i`` uses sequence id ``i`` and scene seed ``seed * 100003 + i``, so
    the train and val scenes never overlap and the output is a pure function
    of the arguments.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    k = default_intrinsics(height, width)
    samples, frames = [], {}
    for i in range(n_train + n_val):
        scene = random_scene(seed * 100003 + i, k, n_frames)
        record = scene_samples(scene, sparsify, seed=seed * 100003 + i, centre_only=True, sequence=i)[0]
        split = "train" if i < n_train else "val"
        samples.append(write_record(root, record, split, frames))
    manifest = Manifest(str(root), samples, frames)
    manifest.validate()
    manifest.save()
    return manifest
