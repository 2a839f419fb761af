"""Acceptance suite: one test per criterion, each printing a PASS/FAIL summary line.

The training criteria (A3-A5) take minutes and are marked ``slow``.
"""

import time

import numpy as np
import pytest

from depthlab.dataset_io import generate_dataset, load_batch
from depthlab.evaluation import benchmark, compute_metrics, evaluate, predict
from depthlab.geometry import Pose, backproject, inverse_warp, transform_points
from depthlab.gradcheck import run_gradcheck
from depthlab.losses import LossBatch, normalized_l1, photometric_loss, ssim, weighted_l1
from depthlab.networks import DepthNet, count_parameters, load_model
from depthlab.preprocess import outlier_filter, spp_densify
from depthlab.synth import SparsifyConfig, random_scene, scene_samples
from depthlab.tensor import Tensor, default_dtype
from depthlab.trainer import TrainConfig, train
from oracles import (
    maxpool_same_loop, metrics_loop, normalized_l1_loop, outlier_filter_loop, ssim_loop, weighted_l1_loop,
)


@pytest.fixture
def criterion(record_property):
    def set_(name, detail=""):
        record_property("criterion", name)
        record_property("detail", detail)
    return set_


def test_a1_gradient_integrity(criterion):
    criterion("A1", "running")
    t0 = time.perf_counter()
    results = run_gradcheck(range(5))
    elapsed = time.perf_counter() - t0
    failed = [f"{r.name}/seed{r.seed}={r.max_rel_error:.1e}" for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    criterion("A1", f"{len(results) - len(failed)}/{len(results)} checks, worst rel err {worst:.1e}, "
                    f"{elapsed:.0f} s")
    assert not failed, failed
    assert {r.seed for r in results} == set(range(5))
    assert worst < 1e-3
    assert elapsed < 300


def _sparse(rng, h, w, density):
    return np.where(rng.random((h, w)) < density, rng.uniform(1.0, 40.0, (h, w)), 0.0)


def test_a2_oracle_equivalence(criterion):
    criterion("A2", "running")
    t0 = time.perf_counter()
    worst = {}
    for i in range(100):
        rng = np.random.default_rng([2, i])
        h, w = int(rng.integers(5, 16)), int(rng.integers(5, 16))

        d = _sparse(rng, h, w, rng.uniform(0.05, 0.5))
        worst["outlier_filter"] = max(worst.get("outlier_filter", 0),
                                      np.abs(outlier_filter(d) - outlier_filter_loop(d)).max())
        stack = spp_densify(d).as_array()
        worst["spp_densify"] = max(worst.get("spp_densify", 0), max(
            np.abs(stack[j + 1] - maxpool_same_loop(d, k)).max() for j, k in enumerate((5, 7, 9, 11))))

        a, b = rng.random((3, h, w)), rng.random((3, h, w))
        with default_dtype(np.float64):
            s = ssim(a[None], b[None]).data[0, 0]
        worst["ssim"] = max(worst.get("ssim", 0), np.abs(s - ssim_loop(a, b)).max())

        gt = _sparse(rng, h, w, 0.5)
        gt[0, 0] = 7.0
        pred = rng.uniform(0.5, 50.0, (h, w))
        with default_dtype(np.float64):
            nl1 = float(normalized_l1(pred, gt).data)
            wl1 = float(weighted_l1(pred, gt, 0.05).data)
        worst["normalized_l1"] = max(worst.get("normalized_l1", 0), abs(nl1 - normalized_l1_loop(pred, gt)))
        worst["weighted_l1"] = max(worst.get("weighted_l1", 0), abs(wl1 - weighted_l1_loop(pred, gt, 0.05)))

        rec = compute_metrics(pred, gt)
        ref = metrics_loop(pred, gt)
        got = np.array([rec.mae_mm, rec.rmse_mm, rec.imae_per_km, rec.irmse_per_km])
        worst["compute_metrics"] = max(worst.get("compute_metrics", 0),
                                       (np.abs(got - ref[:4]) / np.abs(ref[:4])).max())
        assert rec.valid_count == ref[4]
    elapsed = time.perf_counter() - t0
    criterion("A2", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f} s")
    assert worst["outlier_filter"] == 0 and worst["spp_densify"] == 0
    assert worst["ssim"] <= 1e-10
    assert worst["normalized_l1"] <= 1e-12 and worst["weighted_l1"] <= 1e-12
    assert worst["compute_metrics"] <= 1e-9
    assert elapsed < 120


def _train_loss_eq1(checkpoint, records):
    model = load_model(checkpoint)
    model.train()
    sparse = np.stack([r.sparse for r in records])
    seg = np.stack([r.seg.labels for r in records])
    gt = np.stack([r.gt for r in records])
    return float(normalized_l1(model(sparse, seg), gt).data)


@pytest.mark.slow
def test_a3_overfit(criterion, tmp_path):
    criterion("A3", "running")
    t0 = time.perf_counter()
    manifest = generate_dataset(tmp_path / "data", 8, 0, seed=1, height=96, width=320, n_frames=1)
    # full batch: one step per epoch
    config = TrainConfig(regime="supervised", batch_size=8, lr0=1e-2, lr_half_life_epochs=50, flip_prob=0.0,
                         epochs=300, max_steps=300)
    result = train(manifest, "segguided", config, str(tmp_path / "run"))
    records = load_batch(manifest, "train", range(8))
    initial = _train_loss_eq1(tmp_path / "run/ckpt/epoch_000/depth.ckpt", records)
    final = _train_loss_eq1(f"{result.last_dir}/depth.ckpt", records)
    mae = evaluate(manifest, "train", f"{result.last_dir}/depth.ckpt", write_images=False)["aggregate"]["full"]["mae_mm"]
    elapsed = time.perf_counter() - t0
    steps = [h for h in result.history if "step" in h]
    criterion("A3", f"normalized L1 {initial:.3f} -> {final:.4f} ({final / initial:.1%}), MAE {mae:.0f} mm "
                    f"after {len(steps)} steps; {elapsed:.0f} s")
    assert len(steps) == 300
    assert final <= 0.1 * initial
    assert mae <= 300
    assert elapsed < 900


ADAPTATION_RUNS = {
    ("segguided", "supervised"), ("segguided", "semi_supervised"), ("segguided", "self_supervised"),
    ("scaffnet", "semi_supervised"), ("scaffnet", "self_supervised"),
}


@pytest.fixture(scope="module")
def adaptation_benchmark(tmp_path_factory):
    """Five runs per seed on 64x192 scenes whose GT is withheld from the top third."""
    root = tmp_path_factory.mktemp("adaptation")
    t0 = time.perf_counter()
    results = {}
    for seed in range(3):
        manifest = generate_dataset(root / f"data{seed}", 8, 4, seed=seed, height=64, width=192,
                                    sparsify=SparsifyConfig(gt_top_mask=1 / 3))
        val = load_batch(manifest, "val", range(4))
        for kind, regime in sorted(ADAPTATION_RUNS):
            config = TrainConfig(regime=regime, batch_size=4, lr0=1e-2, lr_half_life_epochs=50, epochs=125,
                                 max_steps=250, eval_every=125, seed=seed)
            run = train(manifest, kind, config, str(root / f"{seed}_{kind}_{regime}"))
            ckpt = f"{run.last_dir}/depth.ckpt"
            withheld = evaluate(manifest, "val", ckpt, gt_key="gt_full", write_images=False)["aggregate"]
            labelled = evaluate(manifest, "val", ckpt, write_images=False)["aggregate"]
            pred = predict(load_model(ckpt), val)
            top = pred.shape[1] // 3
            results[seed, kind, regime] = {
                "top_mae_mm": withheld["ood_band"]["mae_mm"],
                "val_mae_mm": labelled["full"]["mae_mm"],
                "std_ratio": float(np.mean([p[:top].std() for p in pred]) / np.mean([p.std() for p in pred])),
            }
    return results, time.perf_counter() - t0


@pytest.mark.slow
def test_a4_ood_region(criterion, adaptation_benchmark):
    criterion("A4", "running")
    results, elapsed = adaptation_benchmark
    rows, passes = [], 0
    for seed in range(3):
        sup, semi = results[seed, "segguided", "supervised"], results[seed, "segguided", "semi_supervised"]
        ratio = semi["top_mae_mm"] / sup["top_mae_mm"]
        ok = ratio <= 0.7 and sup["std_ratio"] < 0.25
        passes += ok
        rows.append(f"seed {seed}: top-band MAE semi/sup {ratio:.2f}, sup top/full std {sup['std_ratio']:.2f}")
    criterion("A4", f"{passes}/3 seeds pass ({'; '.join(rows)}); {elapsed:.0f} s")
    assert passes >= 2
    assert elapsed < 3600


@pytest.mark.slow
def test_a5_regime_ordering(criterion, adaptation_benchmark):
    criterion("A5", "running")
    results, _ = adaptation_benchmark
    rows, ok = [], True
    for kind in ("segguided", "scaffnet"):
        semi = np.mean([results[s, kind, "semi_supervised"]["val_mae_mm"] for s in range(3)])
        self_ = np.mean([results[s, kind, "self_supervised"]["val_mae_mm"] for s in range(3)])
        ok &= semi <= self_
        rows.append(f"{kind} semi {semi:.0f} mm vs self {self_:.0f} mm")
    criterion("A5", "mean validation MAE over 3 seeds: " + "; ".join(rows))
    assert ok


def test_a6_parameter_accounting(criterion):
    seg, scaff = DepthNet("segguided"), DepthNet("scaffnet")
    n_seg, n_scaff = count_parameters(seg), count_parameters(scaff)
    c = seg.config.class_count
    criterion("A6", f"SegGuided {n_seg:,} - ScaffNet {n_scaff:,} = {n_seg - n_scaff} "
                    f"(expected 3*3*{c}*32+32 = {9 * c * 32 + 32}; reference scale 1,488,911 / 1,479,215)")
    assert n_seg - n_scaff == 9 * c * 32 + 32


def test_a7_relative_cost(criterion):
    criterion("A7", "running")
    t0 = time.perf_counter()
    result = benchmark([DepthNet("scaffnet"), DepthNet("segguided")], (96, 320), iterations=50, warmup=5)
    elapsed = time.perf_counter() - t0
    ms = {r["model_kind"]: r["median_ms"] for r in result["records"]}
    ratio = result["segguided_over_scaffnet"]
    criterion("A7", f"SegGuided/ScaffNet forward ratio {ratio:.3f} "
                    f"({ms['segguided']:.0f} ms / {ms['scaffnet']:.0f} ms median at 96x320); {elapsed:.0f} s")
    assert ratio <= 2.0
    assert elapsed < 120


def test_a8_photometric_zero_case(criterion):
    criterion("A8", "running")
    t0 = time.perf_counter()
    losses, identity_err, compose_err = [], 0.0, 0.0
    for seed in range(5):
        scene = random_scene(100 + seed)
        record = scene_samples(scene, seed=seed, centre_only=True)[0]
        batch = LossBatch.from_records([record], np.float64)
        depth = record.gt_full[None, None].astype(np.float64)
        with default_dtype(np.float64):
            losses.append(float(photometric_loss(batch.image, batch.prev_image, batch.next_image, depth,
                                                 record.intrinsics, record.extras["pose_prev"],
                                                 record.extras["pose_next"]).data))
            warped, mask = inverse_warp(batch.image, depth, record.intrinsics, Pose.identity())
            identity_err = max(identity_err, np.abs(warped.data - batch.image)[mask.astype(bool).repeat(3, 1)].max())
            pts = backproject(Tensor(depth), record.intrinsics)
            p10, p02, p12 = scene.relative_pose(1, 0), scene.relative_pose(0, 2), scene.relative_pose(1, 2)
            chained = transform_points(transform_points(pts, Tensor(p10.as_vector()[None])),
                                       Tensor(p02.as_vector()[None]))
            direct = transform_points(pts, Tensor(p12.as_vector()[None]))
            compose_err = max(compose_err, np.abs(chained.data - direct.data).max())
    elapsed = time.perf_counter() - t0
    criterion("A8", f"photometric max {max(losses):.4f} over 5 scenes, identity warp err {identity_err:.1e}, "
                    f"composition err {compose_err:.1e} m; {elapsed:.0f} s")
    assert max(losses) < 0.02
    assert identity_err < 1e-9
    assert compose_err < 1e-9
    assert elapsed < 60
