"""Differentiable feature-map operations in N, C, H, W layout."""

from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import EmptySupportError, Tensor, as_tensor, decision

logger = logging.getLogger(__name__)


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[..., i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _im2col(xs: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, buf: np.ndarray) -> np.ndarray:
    for i in range(kh):
        for j in range(kw):
            buf[:, i, j] = _window(xs, i, j, ho, wo, stride)
    return buf.reshape(-1, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), im2col per sample."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"weight {weight.shape} expects {cw}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d needs padding >= 0 and stride >= 1")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wm = weight.data.reshape(o, c * kh * kw)
    out = np.empty((n, o, ho * wo), dtype=np.result_type(x.dtype, weight.dtype))
    buf = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for s in range(n):
        np.matmul(wm, _im2col(xp[s], kh, kw, ho, wo, stride, buf), out=out[s])
    del buf
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        gm = g.reshape(n, o, ho * wo)
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gw = np.zeros_like(wm) if weight.requires_grad else None
        # stride 1 with narrow outputs: dx is a correlation of g with the flipped kernel,
        # which is cheaper than scattering a (c*kh*kw, ho*wo) column matrix
        direct = x.requires_grad and stride == 1 and padding < min(kh, kw) and o < 2 * c
        gxp = np.zeros_like(xp) if x.requires_grad and not direct else None
        buf = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype) if gw is not None else None
        gx = None
        if direct:
            gx = np.empty(x.shape, dtype=out.dtype)
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
            gbuf = np.empty((o, kh, kw, h, w), dtype=g.dtype)
            for s in range(n):
                np.matmul(wf, _im2col(gp[s], kh, kw, h, w, 1, gbuf), out=gx[s].reshape(c, h * w))
            del gbuf, gp
        for s in range(n):
            if gw is not None:
                gw += gm[s] @ _im2col(xp[s], kh, kw, ho, wo, stride, buf).T
            if gxp is not None:
                dcols = (wm.T @ gm[s]).reshape(c, kh, kw, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        _window(gxp[s], i, j, ho, wo, stride)[...] += dcols[:, i, j]
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, (gw.reshape(weight.shape) if gw is not None else None), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def _channel_sum(a: np.ndarray) -> np.ndarray:
    return np.einsum("nchw->c", a)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("nchw,nchw->c", a, b)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation. Running stats are updated in place when training."""
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    n, c, h, w = x.shape
    count = n * h * w
    if count < 1:
        raise ValueError("batch_norm needs at least one element per channel")
    if training:
        mean = _channel_sum(x.data) / count
        centered = x.data - mean[None, :, None, None]
        var = _channel_dot(centered, centered) / count
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
        centered = x.data - mean[None, :, None, None].astype(x.dtype)
    # var + eps >= eps guards the constant-input case
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        sum_g = _channel_sum(g)
        sum_gx = _channel_dot(g, xhat)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                gx = g - (sum_g / count)[None, :, None, None]
                gx -= xhat * (sum_gx / count)[None, :, None, None]
                gx *= scale
            else:
                gx = g * scale
        return (gx, sum_gx if gamma.requires_grad else None, sum_g if beta.requires_grad else None)

    return Tensor._make(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def pad2d(x: Tensor, padding: int, mode: str = "constant") -> Tensor:
    """Pad the two trailing axes; ``mode`` is one of constant, reflect, replicate."""
    x = as_tensor(x)
    if padding == 0:
        return x
    np_mode = {"constant": "constant", "reflect": "reflect", "replicate": "edge"}[mode]
    h, w = x.shape[-2:]
    rows = np.pad(np.arange(h), padding, mode=np_mode) if mode != "constant" else None
    cols = np.pad(np.arange(w), padding, mode=np_mode) if mode != "constant" else None
    spec = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    out = np.pad(x.data, spec, mode=np_mode)
    p = padding

    def backward(g):
        if mode == "constant":
            return (g[..., p : p + h, p : p + w].copy(),)
        gr = g[..., p : p + h, :].copy()
        for r in list(range(p)) + list(range(p + h, h + 2 * p)):
            gr[..., rows[r], :] += g[..., r, :]
        gx = gr[..., p : p + w].copy()
        for q in list(range(p)) + list(range(p + w, w + 2 * p)):
            gx[..., cols[q]] += gr[..., q]
        return (gx,)

    return Tensor._make(out, (x,), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; padding counts as -inf and ties route the gradient to the first argmax."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = decision(flat.argmax(axis=-1))
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        hp, wp = xp.shape[2:]
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(ho)[:, None] * stride + di
        cols_ = np.arange(wo)[None, :] * stride + dj
        plane = (np.arange(n * c).reshape(n, c, 1, 1) * hp + rows) * wp + cols_
        gxp = np.bincount(plane.ravel(), weights=g.ravel(), minlength=n * c * hp * wp)
        gxp = gxp.reshape(n, c, hp, wp).astype(g.dtype)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._make(out, (x,), backward)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling with zero padding included in the count."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += _window(xp, i, j, ho, wo, stride)
    scale = 1.0 / (kernel * kernel)
    out *= scale

    def backward(g):
        gxp = np.zeros_like(xp)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                _window(gxp, i, j, ho, wo, stride)[...] += gs
        return (gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp,)

    return Tensor._make(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    from .tensor import concat

    return concat([a, b], axis=1)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` is 1."""
    x = as_tensor(x)
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ValueError(f"masked_mean mask shape {mask.shape} != input shape {x.shape}")
    total = float(mask.sum())
    if total <= 0:
        raise EmptySupportError("masked_mean over an empty support")
    m = mask.astype(x.dtype)
    out = np.asarray((x.data * m).sum() / total, dtype=x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * m / total,))


def bilinear_sample(source: Tensor, coords: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``source`` (N,C,H,W) at pixel ``coords`` (N,2,Ho,Wo) holding (x, y).

    Returns the sampled tensor and a float (N,1,Ho,Wo) validity mask. Samples
    outside ``[0, W-1] x [0, H-1]`` are zero with mask 0.
    """
    source, coords = as_tensor(source), as_tensor(coords)
    n, c, h, w = source.shape
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[1] != 2:
        raise ValueError(f"coords must be (N,2,H,W) with N={n}, got {coords.shape}")
    ho, wo = coords.shape[2:]
    x = coords.data[:, 0]
    y = coords.data[:, 1]
    valid = decision(np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1))
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = decision(np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64))
    y0 = decision(np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0).astype(source.dtype)
    wy = (ys - y0).astype(source.dtype)
    vf = valid.astype(source.dtype)

    flat = source.data.reshape(n, c, h * w)
    corners = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    vals = [
        np.take_along_axis(flat, idx.reshape(n, 1, -1), axis=2).reshape(n, c, ho, wo)
        for idx in corners
    ]
    weights = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    out = sum(v * (wt * vf)[:, None] for v, wt in zip(vals, weights))

    def backward(g):
        gsrc = gcoords = None
        if source.requires_grad:
            base = (np.arange(n * c).reshape(n, c, 1) * (h * w))
            gsrc = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, wt in zip(corners, weights):
                pos = base + idx.reshape(n, 1, -1)
                contrib = g * (wt * vf)[:, None]
                gsrc += np.bincount(pos.ravel(), weights=contrib.ravel(), minlength=gsrc.size)
            gsrc = gsrc.reshape(n, c, h, w).astype(source.dtype)
        if coords.requires_grad:
            v00, v01, v10, v11 = vals
            dx = ((1 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10)) * g
            dy = ((1 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01)) * g
            gcoords = np.stack([dx.sum(axis=1) * vf, dy.sum(axis=1) * vf], axis=1)
        return gsrc, gcoords

    mask = vf[:, None]
    return Tensor._make(out, (source, coords), backward), mask
