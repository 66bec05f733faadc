"""Convolution, resampling and normalization ops built on the tape."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import ShapeError, Tensor, _emit, _lift, mean, reshape, sqrt


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input, OIHW weight, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xd = x.data
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = h + 2 * p, wd + 2 * p
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)
    return _emit(np.ascontiguousarray(out), inputs, back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def grid_sample(feat: Tensor, coords: Tensor) -> Tensor:
    """Bilinearly sample ``feat`` [N, C, H, W] at ``coords`` [N, P, 2] -> [N, P, C].

    ``coords[..., 0]`` indexes the width axis and ``coords[..., 1]`` the height
    axis, both normalized to [-1, 1] with -1/+1 at the corner texel centers.
    Out-of-range coordinates are clamped to the border.
    """
    feat, coords = _lift(feat), _lift(coords)
    if feat.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != feat.shape[0]:
        raise ShapeError("grid_sample", feat.shape, coords.shape)
    n, c, h, w = feat.shape
    if h < 2 or w < 2:
        raise ShapeError("grid_sample (plane must be at least 2x2)", feat.shape)
    p = coords.shape[1]
    dtype = feat.data.dtype
    cd = coords.data.astype(dtype, copy=False)
    sx, sy = (w - 1) * 0.5, (h - 1) * 0.5
    ux_raw = (cd[..., 0] + 1.0) * sx
    uy_raw = (cd[..., 1] + 1.0) * sy
    ux = np.clip(ux_raw, 0.0, w - 1)
    uy = np.clip(uy_raw, 0.0, h - 1)
    x0 = np.minimum(np.floor(ux).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(uy).astype(np.int64), h - 2)
    fx = (ux - x0).astype(dtype)[..., None]
    fy = (uy - y0).astype(dtype)[..., None]

    ft = np.ascontiguousarray(feat.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    base = (np.arange(n) * (h * w))[:, None]
    i00 = base + y0 * w + x0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    # interpolation as a sparse [N*P, N*H*W] matrix with four entries per row
    cols = np.stack([i00, i00 + 1, i00 + w, i00 + w + 1], axis=-1).reshape(-1)
    vals = np.stack([w00, w01, w10, w11], axis=-1).reshape(-1)
    interp = sparse.csr_matrix((vals, cols, np.arange(0, 4 * n * p + 1, 4)), shape=(n * p, n * h * w))
    out = (interp @ ft).reshape(n, p, c)

    def back(g):
        gfeat = None
        if feat.requires_grad:
            acc = interp.T @ np.ascontiguousarray(g, dtype=dtype).reshape(n * p, c)
            gfeat = acc.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gcoord = None
        if coords.requires_grad:
            f00, f01, f10, f11 = ft[i00], ft[i00 + 1], ft[i00 + w], ft[i00 + w + 1]
            dux = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
            duy = (1 - fx) * (f10 - f00) + fx * (f11 - f01)
            gx = (g * dux).sum(axis=-1) * sx * ((ux_raw >= 0) & (ux_raw <= w - 1))
            gy = (g * duy).sum(axis=-1) * sy * ((uy_raw >= 0) & (uy_raw <= h - 1))
            gcoord = np.stack([gx, gy], axis=-1).astype(coords.data.dtype)
        return gfeat, gcoord
    return _emit(out, (feat, coords), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = x @ w
    return y + b if b is not None else y


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm", x.shape, (groups,))
    xg = reshape(x, (n, groups, c // groups, h, w))
    mu = mean(xg, axis=(2, 3, 4), keepdims=True)
    xc = xg - mu
    var = mean(xc * xc, axis=(2, 3, 4), keepdims=True)
    xn = reshape(xc / sqrt(var + eps), (n, c, h, w))
    return xn * reshape(gamma, (1, c, 1, 1)) + reshape(beta, (1, c, 1, 1))
