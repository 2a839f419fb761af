"""Finite-difference checks of every differentiable operation and of the full training graphs.

All checks run in float64 with central differences. Inputs are built so that a
step of ``eps`` does not cross a kink (ReLU, max, abs, bilinear cell edges,
validity-mask borders), which would make the numeric derivative meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .geometry import Intrinsics, inverse_warp, invert_pose_params, rodrigues
from .losses import LossBatch, LossWeights, Regime, normalized_l1, photometric_loss, smoothness_loss, ssim
from .losses import total_loss, weighted_l1
from .networks import DepthNet, NetworkConfig, PoseNet
from .tensor import DecisionTape, Tensor, decision_tape, default_dtype, matmul

# small widths keep the full-graph checks fast; the graph structure is unchanged
CHECK_NETWORK = NetworkConfig(encoder_channels=(4, 4, 6, 6, 8), fusion_channels=4, seg_feature_channels=4,
                              posenet_channels=(4, 4, 6, 6, 8))


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    seed: int
    max_rel_error: float
    checked: int
    passed: bool


def _leaf(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, lo=0.05, hi=1.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape, gap=0.01):
    # values on a grid of spacing ``gap`` so maxima are unique by a margin
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 10)).reshape(shape)


def _projection(rng, shape):
    return rng.normal(size=shape)


def _scalar(out: Tensor, proj: np.ndarray) -> Tensor:
    return (out * Tensor(proj)).sum()


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(fn: Callable[[], Tensor], inputs: list, rng, eps: float = 1e-3, max_entries: int = 16) -> tuple[float, int]:
    """Worst per-tensor relative error between backward() and central differences.

    Perturbed passes replay the kink decisions of the unperturbed pass, so the
    difference quotient is taken on the same linear piece as the analytic
    gradient. Tensors whose gradient is below 1e-7 of the largest one (for
    example a bias cancelled by batch norm) are compared against that floor.
    """
    for t in inputs:
        t.grad = None
    tape = DecisionTape()
    with decision_tape(tape):
        fn().backward()
    tape.replay()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    floor = max(1e-10, 1e-7 * max(np.linalg.norm(g) for g in analytic))
    worst, checked = 0.0, 0
    with decision_tape(tape):
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
            numeric = np.empty(len(picks))
            for j, i in enumerate(picks):
                old = flat[i]
                flat[i] = old + eps
                tape.replay()
                up = float(fn().data)
                flat[i] = old - eps
                tape.replay()
                down = float(fn().data)
                flat[i] = old
                numeric[j] = (up - down) / (2 * eps)
            worst = max(worst, relative_error(grad.reshape(-1)[picks], numeric, floor))
            checked += len(picks)
    return worst, checked


# -- cases -------------------------------------------------------------------
# each builder returns (scalar function, leaf tensors)

def _case_conv(stride):
    def build(rng):
        x = _leaf(rng.normal(size=(2, 3, 9, 8)))
        w = _leaf(rng.normal(size=(4, 3, 3, 3)))
        b = _leaf(rng.normal(size=4))
        proj = _projection(rng, F.conv2d(x, w, b, stride, 1).shape)
        return (lambda: _scalar(F.conv2d(x, w, b, stride, 1), proj)), [x, w, b]
    return build


def _case_conv_wide_in(rng):
    x = _leaf(rng.normal(size=(2, 6, 7, 7)))
    w = _leaf(rng.normal(size=(2, 6, 3, 3)))
    proj = _projection(rng, (2, 2, 7, 7))
    return (lambda: _scalar(F.conv2d(x, w, None, 1, 1), proj)), [x, w]


def _case_batch_norm(training):
    def build(rng):
        x = _leaf(rng.normal(size=(3, 4, 5, 5)))
        g = _leaf(rng.uniform(0.5, 1.5, 4))
        b = _leaf(rng.normal(size=4))
        mean, var = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)
        proj = _projection(rng, x.shape)
        return (lambda: _scalar(F.batch_norm(x, g, b, mean.copy(), var.copy(), training), proj)), [x, g, b]
    return build


def _case_relu(rng):
    x = _leaf(_away_from_zero(rng, (2, 3, 4, 4)))
    proj = _projection(rng, x.shape)
    return (lambda: _scalar(F.relu(x), proj)), [x]


def _case_max_pool(rng):
    x = _leaf(_distinct(rng, (2, 2, 6, 6)))
    proj = _projection(rng, (2, 2, 3, 3))
    return (lambda: _scalar(F.max_pool2d(x, 3, 2, 1), proj)), [x]


def _case_avg_pool(rng):
    x = _leaf(rng.normal(size=(2, 2, 6, 6)))
    proj = _projection(rng, (2, 2, 6, 6))
    return (lambda: _scalar(F.avg_pool2d(x, 3, 1, 1), proj)), [x]


def _case_pad(mode):
    def build(rng):
        x = _leaf(rng.normal(size=(2, 2, 5, 4)))
        proj = _projection(rng, (2, 2, 9, 8))
        return (lambda: _scalar(F.pad2d(x, 2, mode), proj)), [x]
    return build


def _case_upsample_concat(rng):
    a = _leaf(rng.normal(size=(2, 2, 3, 4)))
    b = _leaf(rng.normal(size=(2, 3, 6, 8)))
    proj = _projection(rng, (2, 5, 6, 8))
    return (lambda: _scalar(F.concat_channels(F.upsample_nearest2x(a), b), proj)), [a, b]


def _case_elementwise(rng):
    a = _leaf(rng.uniform(0.5, 2.0, (3, 4)))
    b = _leaf(_away_from_zero(rng, (3, 4), 0.5, 2.0))
    c = _leaf(rng.normal(size=(4, 2)))
    proj = _projection(rng, (3, 4))

    def fn():
        y = (a * b + a / b - b) ** 2 + a.exp() * a.log() + a.sqrt() + b.abs()
        return _scalar(y, proj) + matmul(a, c).mean() + y.sum(axis=1).mean()

    return fn, [a, b, c]


def _case_masked_mean(rng):
    x = _leaf(rng.normal(size=(2, 1, 4, 5)))
    mask = (rng.random((2, 1, 4, 5)) < 0.6).astype(float)
    mask[0, 0, 0, 0] = 1.0
    return (lambda: F.masked_mean(x * x, mask)), [x]


def _case_bilinear(rng):
    src = _leaf(rng.normal(size=(2, 2, 6, 7)))
    # coordinates strictly inside cells, away from integer grid lines
    base = rng.integers(0, 5, (2, 2, 4, 4)).astype(float)
    frac = rng.uniform(0.1, 0.9, (2, 2, 4, 4))
    coords = _leaf(base + frac)
    proj = _projection(rng, (2, 2, 4, 4))
    return (lambda: _scalar(F.bilinear_sample(src, coords)[0], proj)), [src, coords]


def _case_rodrigues(rng):
    omega = rng.normal(size=(4, 3))
    omega[0] *= 1e-5  # exercise the small-angle branch
    w = _leaf(omega)
    proj = _projection(rng, (4, 3, 3))
    return (lambda: _scalar(rodrigues(w), proj)), [w]


def _case_invert_pose(rng):
    p = _leaf(np.concatenate([rng.normal(0, 0.3, (3, 3)), rng.normal(size=(3, 3))], axis=1))
    proj = _projection(rng, (3, 6))
    return (lambda: _scalar(invert_pose_params(p), proj)), [p]


def _small_scene(rng, n=2, h=12, w=16):
    k = Intrinsics(10.0, 10.0, (w - 1) / 2, (h - 1) / 2, w, h)
    yy, xx = np.mgrid[0:h, 0:w] / 4.0
    img = np.stack([0.5 + 0.3 * np.sin(xx * (1 + c) + yy * (2 - c) + rng.uniform(0, 6)) for c in range(3)])
    images = np.stack([img] * n)
    depth = rng.uniform(6.0, 9.0, (n, 1, h, w))
    # the neighbour cameras sit behind frame t, so every pixel reprojects inside the frame
    pose = np.concatenate([rng.normal(0, 0.004, (n, 3)), rng.normal(0, 0.05, (n, 2)),
                           rng.uniform(1.0, 1.5, (n, 1))], axis=1)
    return k, images, depth, pose


def _case_inverse_warp(rng):
    k, images, depth, pose = _small_scene(rng)
    src = images + 0.05 * rng.normal(size=images.shape)
    d, p = _leaf(depth), _leaf(pose)
    proj = _projection(rng, images.shape)
    return (lambda: _scalar(inverse_warp(src, d, k, p)[0], proj)), [d, p]


def _case_depth_losses(rng):
    pred = _leaf(rng.uniform(1.0, 10.0, (2, 1, 5, 6)))
    gt = np.where(rng.random((2, 1, 5, 6)) < 0.7, rng.uniform(1.0, 10.0, (2, 1, 5, 6)), 0.0)
    gt = np.where(np.abs(gt - pred.data) < 0.05, 0.0, gt)  # keep |pred - gt| off its kink
    gt[0, 0, 0, 0] = pred.data[0, 0, 0, 0] + 1.0
    return (lambda: normalized_l1(pred, gt) + weighted_l1(pred, gt, 0.05)), [pred]


def _case_ssim(rng):
    a = _leaf(rng.uniform(0.1, 0.9, (2, 3, 6, 6)))
    b = _leaf(rng.uniform(0.1, 0.9, (2, 3, 6, 6)))
    proj = _projection(rng, (2, 1, 6, 6))
    return (lambda: _scalar(ssim(a, b), proj)), [a, b]


def _case_photometric(rng):
    k, images, depth, pose = _small_scene(rng)
    prev = images + 0.03 * rng.normal(size=images.shape)
    nxt = images + 0.03 * rng.normal(size=images.shape)
    d, p1, p2 = _leaf(depth), _leaf(pose), _leaf(pose * np.array([1, 1, 1, 1, 1, 0.8]))
    return (lambda: photometric_loss(images, prev, nxt, d, k, p1, p2, LossWeights())), [d, p1, p2]


def _case_smoothness(rng):
    d = _leaf(rng.uniform(1.0, 10.0, (2, 1, 6, 7)))
    img = rng.uniform(0, 1, (2, 3, 6, 7))
    return (lambda: smoothness_loss(d, img, 0.01)), [d]


def _case_total(regime):
    def build(rng):
        k, images, depth, pose = _small_scene(rng)
        n, _, h, w = depth.shape
        gt = np.where(rng.random((n, h, w)) < 0.5, rng.uniform(6.0, 9.0, (n, h, w)), 0.0)
        gt = np.where(np.abs(gt - depth[:, 0]) < 0.05, 0.0, gt)
        gt[:, 0, 0] = depth[:, 0, 0, 0] + 1.0
        sparse = np.where(rng.random((n, h, w)) < 0.2, gt, 0.0)
        sparse[:, 0, 0] = gt[:, 0, 0]
        batch = LossBatch(images, images + 0.03 * rng.normal(size=images.shape),
                          images + 0.03 * rng.normal(size=images.shape), sparse, gt, [k] * n,
                          np.ones(n, dtype=bool))
        d, p1, p2 = _leaf(depth), _leaf(pose), _leaf(pose)
        if Regime(regime).photometric:
            return (lambda: total_loss(batch, d, regime, LossWeights(), p1, p2).total), [d, p1, p2]
        return (lambda: total_loss(batch, d, regime).total), [d]
    return build


def _network_inputs(rng, n=2, h=64, w=64):
    sparse = np.where(rng.random((n, h, w)) < 0.15, rng.uniform(2, 30, (n, h, w)), 0.0)
    seg = rng.integers(0, CHECK_NETWORK.class_count, (n, h, w))
    return sparse, seg


def _case_depthnet(kind):
    def build(rng):
        net = DepthNet(kind, CHECK_NETWORK, seed=int(rng.integers(1 << 30)))
        net.train()
        sparse, seg = _network_inputs(rng)
        seg_in = seg if kind == "segguided" else None
        proj = _projection(rng, (2, 1, 64, 64))
        params = net.parameters()
        return (lambda: _scalar(net(sparse, seg_in), proj)), params
    return build


def _case_posenet(rng):
    net = PoseNet(CHECK_NETWORK, seed=int(rng.integers(1 << 30)))
    a = rng.uniform(0, 1, (2, 3, 64, 64))
    b = rng.uniform(0, 1, (2, 3, 64, 64))
    proj = _projection(rng, (2, 6))
    return (lambda: _scalar(net(a, b), proj)), net.parameters()


CASES = {
    "conv2d_stride1": _case_conv(1),
    "conv2d_stride2": _case_conv(2),
    "conv2d_narrow_out": _case_conv_wide_in,
    "batch_norm_train": _case_batch_norm(True),
    "batch_norm_eval": _case_batch_norm(False),
    "relu": _case_relu,
    "max_pool2d": _case_max_pool,
    "avg_pool2d": _case_avg_pool,
    "pad_constant": _case_pad("constant"),
    "pad_reflect": _case_pad("reflect"),
    "pad_replicate": _case_pad("replicate"),
    "upsample_concat": _case_upsample_concat,
    "elementwise_reductions": _case_elementwise,
    "masked_mean": _case_masked_mean,
    "bilinear_sample": _case_bilinear,
    "rodrigues": _case_rodrigues,
    "invert_pose": _case_invert_pose,
    "inverse_warp": _case_inverse_warp,
    "depth_l1_losses": _case_depth_losses,
    "ssim": _case_ssim,
    "photometric_loss": _case_photometric,
    "smoothness_loss": _case_smoothness,
    "total_loss_synthetic": _case_total("synthetic"),
    "total_loss_supervised": _case_total("supervised"),
    "total_loss_self_supervised": _case_total("self_supervised"),
    "total_loss_semi_supervised": _case_total("semi_supervised"),
    "scaffnet": _case_depthnet("scaffnet"),
    "segguided": _case_depthnet("segguided"),
    "posenet": _case_posenet,
}


# entries sampled per parameter tensor in the full-network cases
NETWORK_ENTRIES = 3


def run_gradcheck(seeds=range(5), names=None, eps: float = 1e-3, tol: float = 1e-3,
                  max_entries: int = 16) -> list:
    """Run the selected cases for every seed; returns one GradcheckResult per (case, seed)."""
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - set(CASES)
    if unknown:
        raise KeyError(f"unknown gradcheck cases {sorted(unknown)}")
    results = []
    with default_dtype(np.float64):
        for name in names:
            for seed in seeds:
                rng = np.random.default_rng([seed, sum(map(ord, name))])
                fn, inputs = CASES[name](rng)
                entries = min(max_entries, NETWORK_ENTRIES) if name in ("scaffnet", "segguided") else max_entries
                err, n = check(fn, inputs, rng, eps, entries)
                results.append(GradcheckResult(name, int(seed), err, n, err < tol))
    return results


__all__ = ["CASES", "CHECK_NETWORK", "GradcheckResult", "check", "relative_error", "run_gradcheck"]
