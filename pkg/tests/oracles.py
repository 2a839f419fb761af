"""Scalar-loop reference implementations used as independent oracles.

Each function visits pixels one at a time with plain Python control flow and
shares no code with the package.
"""

import math

import numpy as np


def outlier_filter_loop(sparse, window=7, margin=1.5):
    h, w = sparse.shape
    r = window // 2
    out = np.zeros_like(sparse)
    for i in range(h):
        for j in range(w):
            d = sparse[i, j]
            if d <= 0:
                continue
            m = math.inf
            for y in range(max(0, i - r), min(h, i + r + 1)):
                for x in range(max(0, j - r), min(w, j + r + 1)):
                    v = sparse[y, x]
                    if 0 < v < m:
                        m = v
            if d <= m + margin:
                out[i, j] = d
    return out


def maxpool_same_loop(depth, k):
    h, w = depth.shape
    r = k // 2
    out = np.zeros_like(depth)
    for i in range(h):
        for j in range(w):
            best = -math.inf
            for y in range(max(0, i - r), min(h, i + r + 1)):
                for x in range(max(0, j - r), min(w, j + r + 1)):
                    best = max(best, depth[y, x])
            out[i, j] = best
    return out


def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def ssim_loop(a, b, window=3, c1=0.01**2, c2=0.03**2):
    """a, b: (C, H, W). Returns (H, W) SSIM averaged over channels."""
    c, h, w = a.shape
    r = window // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            total = 0.0
            for ch in range(c):
                xs, ys = [], []
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        y, x = _reflect(i + dy, h), _reflect(j + dx, w)
                        xs.append(a[ch, y, x])
                        ys.append(b[ch, y, x])
                n = len(xs)
                mx, my = sum(xs) / n, sum(ys) / n
                vx = sum((v - mx) ** 2 for v in xs) / n
                vy = sum((v - my) ** 2 for v in ys) / n
                cov = sum((u - mx) * (v - my) for u, v in zip(xs, ys)) / n
                total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            out[i, j] = total / c
    return out


def normalized_l1_loop(pred, gt):
    s, n = 0.0, 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g > 0:
            s += abs(p - g) / g
            n += 1
    return s / n


def weighted_l1_loop(pred, gt, w_depth):
    s, n = 0.0, 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g > 0:
            s += abs(p - g)
            n += 1
    return w_depth * s / n


def metrics_loop(pred, gt, mask=None):
    """(mae_mm, rmse_mm, imae_per_km, irmse_per_km, count)."""
    a = sq = ia = isq = 0.0
    n = 0
    for idx in np.ndindex(gt.shape):
        g = gt[idx]
        if g <= 0 or (mask is not None and not mask[idx]):
            continue
        p = pred[idx]
        a += abs(p - g)
        sq += (p - g) ** 2
        ia += abs(1 / p - 1 / g)
        isq += (1 / p - 1 / g) ** 2
        n += 1
    return a / n * 1000, math.sqrt(sq / n) * 1000, ia / n * 1000, math.sqrt(isq / n) * 1000, n


def conv2d_loop(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for s in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else bias[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride + u - padding, j * stride + v - padding
                                if 0 <= y < h and 0 <= xx < w:
                                    acc += x[s, ic, y, xx] * weight[oc, ic, u, v]
                    out[s, oc, i, j] = acc
    return out


def smoothness_loop(depth, image, w_sm):
    """depth (H, W), image (C, H, W)."""
    c, h, w = image.shape
    total = 0.0
    for i in range(h - 1):
        for j in range(w - 1):
            ix = sum(abs(image[k, i, j + 1] - image[k, i, j]) for k in range(c)) / c
            iy = sum(abs(image[k, i + 1, j] - image[k, i, j]) for k in range(c)) / c
            total += abs(depth[i, j + 1] - depth[i, j]) * math.exp(-ix)
            total += abs(depth[i + 1, j] - depth[i, j]) * math.exp(-iy)
    return w_sm * total / ((h - 1) * (w - 1))
