"""Depth metrics, region-wise evaluation, colourised outputs and forward-time benchmarks."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset_io import Manifest, load_batch, read_depth, read_seg, write_depth, write_image
from .networks import DepthNet, ModelKind, load_model
from .nn import atomic_write, count_parameters
from .tensor import EmptySupportError

REPORT_VERSION = 1
REGIONS = ("full", "ood_band", "labeled_band")
OOD_FRACTION = 1.0 / 3.0


@dataclass(frozen=True)
class MetricsRecord:
    mae_mm: float
    rmse_mm: float
    imae_per_km: float
    irmse_per_km: float
    valid_count: int
    region: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, region_mask: np.ndarray | None = None,
                    region: str | None = None) -> MetricsRecord:
    """MAE/RMSE in millimetres and iMAE/iRMSE in 1/km over {gt > 0} within ``region_mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    support = gt > 0
    if region_mask is not None:
        support &= np.asarray(region_mask, dtype=bool)
    n = int(support.sum())
    if n == 0:
        raise EmptySupportError(f"no valid ground truth in region {region or 'full'}")
    p, g = pred[support], gt[support]
    if np.any(p <= 0):
        raise ValueError("predictions must be positive on the evaluated support")
    err = p - g
    inv = 1.0 / p - 1.0 / g
    return MetricsRecord(
        mae_mm=float(np.abs(err).mean() * 1000.0),
        rmse_mm=float(np.sqrt((err**2).mean()) * 1000.0),
        imae_per_km=float(np.abs(inv).mean() * 1000.0),
        irmse_per_km=float(np.sqrt((inv**2).mean()) * 1000.0),
        valid_count=n,
        region=region,
    )


def aggregate(records: list) -> MetricsRecord:
    """Pixel-weighted pooling: the metrics of the union of all supports."""
    records = [r for r in records if r is not None]
    if not records:
        raise EmptySupportError("nothing to aggregate")
    n = sum(r.valid_count for r in records)
    w = [r.valid_count / n for r in records]
    out = MetricsRecord(
        mae_mm=sum(wi * r.mae_mm for wi, r in zip(w, records)),
        rmse_mm=math.sqrt(sum(wi * r.rmse_mm**2 for wi, r in zip(w, records))),
        imae_per_km=sum(wi * r.imae_per_km for wi, r in zip(w, records)),
        irmse_per_km=math.sqrt(sum(wi * r.irmse_per_km**2 for wi, r in zip(w, records))),
        valid_count=n,
        region=records[0].region,
    )
    # power-mean inequality on a shared support (small slack for rounding)
    assert out.rmse_mm >= out.mae_mm * (1 - 1e-12) and out.irmse_per_km >= out.imae_per_km * (1 - 1e-12)
    return out


def region_masks(height: int, width: int, ood_fraction: float = OOD_FRACTION) -> dict:
    """full, ood_band (top rows without training labels) and labeled_band (the rest)."""
    rows = int(round(height * ood_fraction))
    ood = np.zeros((height, width), dtype=bool)
    ood[:rows] = True
    return {"full": np.ones((height, width), dtype=bool), "ood_band": ood, "labeled_band": ~ood}


# -- colour ------------------------------------------------------------------

def _turbo_table() -> np.ndarray:
    # polynomial fit of the Turbo colormap, sampled at 256 points
    x = np.linspace(0.0, 1.0, 256)
    powers = np.stack([np.ones_like(x), x, x**2, x**3, x**4, x**5])
    coeffs = np.array([
        [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943],
        [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604],
        [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973],
    ])
    return np.round(np.clip(coeffs @ powers, 0, 1).T * 255).astype(np.uint8)


TURBO = _turbo_table()


def colorize_depth(depth: np.ndarray, max_depth: float = 80.0, near: float = 2.0) -> np.ndarray:
    """Turbo colours linear in inverse depth, red at ``near`` and closer; missing pixels are black."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    inv = 1.0 / np.where(valid, depth, max_depth)
    t = np.clip((inv - 1.0 / max_depth) / (1.0 / near - 1.0 / max_depth), 0, 1)
    out = TURBO[np.round(t * 255).astype(int)].astype(np.float64) / 255.0
    out[~valid] = 0.0
    return out


def colorize_error(pred: np.ndarray, gt: np.ndarray, limit_m: float = 5.0) -> np.ndarray:
    """Signed error map: blue under-estimates, red over-estimates, white exact, black no ground truth."""
    err = np.clip((np.asarray(pred, float) - np.asarray(gt, float)) / limit_m, -1, 1)
    valid = np.asarray(gt) > 0
    out = np.ones(err.shape + (3,))
    pos, neg = np.clip(err, 0, 1), np.clip(-err, 0, 1)
    out[..., 0] -= neg
    out[..., 1] -= pos + neg
    out[..., 2] -= pos
    out[~valid] = 0.0
    return np.clip(out, 0, 1)


# -- evaluation ----------------------------------------------------------------

def _load_depth_model(checkpoint) -> DepthNet:
    model = load_model(str(checkpoint)) if not isinstance(checkpoint, DepthNet) else checkpoint
    if not isinstance(model, DepthNet):
        raise ValueError(f"{checkpoint} is not a depth-network checkpoint")
    return model


def predict(model: DepthNet, records: list) -> np.ndarray:
    sparse = np.stack([r.sparse for r in records])
    seg = np.stack([r.seg.labels for r in records]) if model.kind is ModelKind.SEGGUIDED else None
    was_training = model.training
    model.eval()
    try:
        return model(sparse, seg).data[:, 0].astype(np.float64)
    finally:
        model.train(was_training)


def evaluate(manifest: Manifest | str, split: str, checkpoint, out_dir: str | None = None, gt_key: str = "gt",
             oracle: bool = False, batch_size: int = 4, write_images: bool = True) -> dict:
    """Eval-mode metrics per sample and per region, pooled over the split.

    ``gt_key`` picks the reference (``gt`` or the unmasked ``gt_full``).
    ``oracle`` replaces predictions by the reference itself. Regions with no
    valid reference pixels are reported as null.
    """
    if isinstance(manifest, (str, Path)):
        manifest = Manifest.load(manifest)
    model = None if oracle else _load_depth_model(checkpoint)
    entries = manifest.split(split)
    per_sample, pooled = [], {r: [] for r in REGIONS}
    out = Path(out_dir) if out_dir else None
    for start in range(0, len(entries), batch_size):
        records = load_batch(manifest, split, range(start, min(start + batch_size, len(entries))))
        refs = []
        for r in records:
            ref = r.gt_full if gt_key == "gt_full" else r.gt
            if ref is None:
                raise ValueError(f"sample {r.ids[1]} has no {gt_key} depth")
            refs.append(ref.astype(np.float64))
        preds = np.stack(refs) if oracle else predict(model, records)
        for r, ref, pred in zip(records, refs, preds):
            masks = region_masks(*ref.shape)
            row = {"id": r.ids[1], "metrics": {}}
            for name in REGIONS:
                try:
                    rec = compute_metrics(pred, ref, masks[name], name)
                except EmptySupportError:
                    rec = None
                row["metrics"][name] = rec.to_dict() if rec else None
                pooled[name].append(rec)
            per_sample.append(row)
            if out is not None and write_images:
                write_image(out / f"depth_{r.ids[1]}.ppm", colorize_depth(pred))
                write_image(out / f"error_{r.ids[1]}.ppm", colorize_error(pred, ref))
    agg = {}
    for name in REGIONS:
        recs = [x for x in pooled[name] if x is not None]
        agg[name] = aggregate(recs).to_dict() if recs else None
    report = {
        "format_version": REPORT_VERSION,
        "split": split,
        "reference": gt_key,
        "checkpoint": None if oracle else (str(checkpoint) if not isinstance(checkpoint, DepthNet) else "<memory>"),
        "aggregate": agg,
        "samples": per_sample,
    }
    if out is not None:
        atomic_write(str(out / "report.json"), (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    return report


# -- benchmark -------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkRecord:
    model_kind: str
    parameter_count: int
    median_ms: float
    p95_ms: float
    train_step_ms: float | None
    resolution: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def _bench_inputs(height: int, width: int, class_count: int, batch: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    sparse = np.where(rng.random((batch, height, width)) < 0.05, rng.uniform(2, 60, (batch, height, width)), 0.0)
    seg = rng.integers(0, class_count, (batch, height, width))
    return sparse.astype(np.float32), seg


def benchmark(models: list, resolution: tuple = (96, 320), iterations: int = 50, warmup: int = 5,
              train_batch: int = 0) -> dict:
    """Warm single-sample forward timings (median, p95) and optional train-step time per model.

    ``models`` holds DepthNets or checkpoint paths. The returned dict carries the
    records and, when both kinds are present, the SegGuided/ScaffNet ratio of
    median forward times.
    """
    if iterations < 1 or warmup < 0:
        raise ValueError("iterations must be >= 1 and warmup >= 0")
    h, w = resolution
    records = []
    for m in models:
        model = _load_depth_model(m)
        model.eval()
        sparse, seg = _bench_inputs(h, w, model.config.class_count, 1)
        seg_in = seg if model.kind is ModelKind.SEGGUIDED else None
        for _ in range(warmup):
            model(sparse, seg_in)
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            model(sparse, seg_in)
            times.append((time.perf_counter() - t0) * 1000.0)
        train_ms = None
        if train_batch:
            model.train()
            sp, sg = _bench_inputs(h, w, model.config.class_count, train_batch, seed=1)
            t0 = time.perf_counter()
            model(sp, sg if model.kind is ModelKind.SEGGUIDED else None).mean().backward()
            train_ms = (time.perf_counter() - t0) * 1000.0
            model.zero_grad()
            model.eval()
        records.append(BenchmarkRecord(model.kind.value, count_parameters(model), float(np.median(times)),
                                       float(np.percentile(times, 95)), train_ms, (h, w)))
    by_kind = {r.model_kind: r for r in records}
    ratio = None
    if ModelKind.SEGGUIDED.value in by_kind and ModelKind.SCAFFNET.value in by_kind:
        ratio = by_kind["segguided"].median_ms / by_kind["scaffnet"].median_ms
    return {"records": [r.to_dict() for r in records], "segguided_over_scaffnet": ratio}


# -- single-sample inference --------------------------------------------------------

def infer_directory(checkpoint, sample_dir: str, out_dir: str, class_count: int | None = None) -> np.ndarray:
    """Run one checkpoint on ``sample_dir`` (sparse.pgm, plus seg.pgm for SegGuided).

    Writes depth.pgm (16-bit, 1/256 m) and depth.ppm (colourised) to ``out_dir``.
    """
    model = _load_depth_model(checkpoint)
    sample = Path(sample_dir)
    sparse = read_depth(sample / "sparse.pgm")
    seg = None
    if model.kind is ModelKind.SEGGUIDED:
        seg = read_seg(sample / "seg.pgm", class_count or model.config.class_count).labels[None]
    model.eval()
    depth = model(sparse[None], seg).data[0, 0].astype(np.float64)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_depth(out / "depth.pgm", np.clip(depth, 0, 255.99))
    write_image(out / "depth.ppm", colorize_depth(depth))
    return depth


__all__ = [
    "MetricsRecord", "compute_metrics", "aggregate", "region_masks", "colorize_depth", "colorize_error",
    "evaluate", "predict", "BenchmarkRecord", "benchmark", "infer_directory", "TURBO",
]
