"""Differentiable bilinear grid sampling.

Pixel centres sit at integer coordinates.  ``bilinear_sample`` is the
sampling layer of both spatial transformers: it reads a channels-last source
``(H, W, C)`` at arbitrary real coordinates and back-propagates into the
source values and into the grid.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .diffcore import Tensor, as_tensor, record, reshape
from .errors import InputError
from .geometry import Keypoint, make_identity_meshgrid

PADDING_MODES = ("zeros", "clamp")


def _gather(src: np.ndarray, xi: np.ndarray, yi: np.ndarray, padding: str):
    H, W = src.shape[:2]
    if padding == "clamp":
        xc = np.clip(xi, 0, W - 1)
        yc = np.clip(yi, 0, H - 1)
        return src[yc, xc], None, yc * W + xc
    valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    xc = np.where(valid, xi, 0)
    yc = np.where(valid, yi, 0)
    vals = src[yc, xc]
    vals = np.where(valid[..., None], vals, 0)
    return vals, valid, yc * W + xc


def bilinear_sample(source, grid, padding: str = "zeros") -> Tensor:
    """Sample ``source`` (H, W, C) at ``grid`` (..., 2); returns (..., C).

    Out-of-bounds taps read 0 (``zeros``) or the nearest border pixel
    (``clamp``).  At exact integer coordinates the grid gradient takes the
    left-limit difference.
    """
    source = as_tensor(source)
    grid = as_tensor(grid)
    src, gv = source.value, grid.value
    if padding not in PADDING_MODES:
        raise InputError(f"unknown padding policy {padding!r}")
    if src.ndim == 2:
        raise InputError("bilinear_sample: source must be (H, W, C)")
    if src.ndim != 3 or src.shape[0] < 2 or src.shape[1] < 2:
        raise InputError(f"bilinear_sample: source dims {src.shape} need H, W >= 2")
    if gv.shape[-1] != 2:
        raise InputError(f"bilinear_sample: grid dims {gv.shape} must end in 2")
    if not np.isfinite(gv).all():
        raise InputError("bilinear_sample: grid contains non-finite coordinates")
    H, W, C = src.shape
    dtype = np.result_type(src.dtype, gv.dtype)
    px, py = gv[..., 0], gv[..., 1]
    fx0, fy0 = np.floor(px), np.floor(py)
    fx = (px - fx0).astype(dtype)[..., None]
    fy = (py - fy0).astype(dtype)[..., None]
    x0, y0 = fx0.astype(np.intp), fy0.astype(np.intp)
    x1, y1 = x0 + 1, y0 + 1

    v00, m00, i00 = _gather(src, x0, y0, padding)
    v01, m01, i01 = _gather(src, x1, y0, padding)
    v10, m10, i10 = _gather(src, x0, y1, padding)
    v11, m11, i11 = _gather(src, x1, y1, padding)
    one = dtype.type(1)
    w00, w01 = (one - fx) * (one - fy), fx * (one - fy)
    w10, w11 = (one - fx) * fy, fx * fy
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def grad_fn(g):
        gs = None
        if source.requires_grad:
            idx, wts = [], []
            for i, w, m in ((i00, w00, m00), (i01, w01, m01), (i10, w10, m10), (i11, w11, m11)):
                w = w[..., 0]
                if m is not None:
                    w = np.where(m, w, 0)
                idx.append(i.ravel())
                wts.append(w.ravel())
            npts = idx[0].size
            rows = np.concatenate(idx)
            cols = np.tile(np.arange(npts), 4)
            S = sp.csr_matrix((np.concatenate(wts), (rows, cols)), shape=(H * W, npts))
            gs = np.asarray(S @ g.reshape(npts, C)).reshape(H, W, C).astype(src.dtype, copy=False)
        gg = None
        if grid.requires_grad:
            # d/dx uses the cell left of integer x; d/dy the cell above integer y
            xg = np.where(px == fx0, x0 - 1, x0)
            yg = np.where(py == fy0, y0 - 1, y0)
            if np.array_equal(xg, x0):
                a00, a01, a10, a11 = v00, v01, v10, v11
            else:
                a00 = _gather(src, xg, y0, padding)[0]
                a01 = _gather(src, xg + 1, y0, padding)[0]
                a10 = _gather(src, xg, y1, padding)[0]
                a11 = _gather(src, xg + 1, y1, padding)[0]
            if np.array_equal(yg, y0):
                b00, b01, b10, b11 = v00, v01, v10, v11
            else:
                b00 = _gather(src, x0, yg, padding)[0]
                b01 = _gather(src, x1, yg, padding)[0]
                b10 = _gather(src, x0, yg + 1, padding)[0]
                b11 = _gather(src, x1, yg + 1, padding)[0]
            dx = (a01 - a00) * (one - fy) + (a11 - a10) * fy
            dy = (b10 - b00) * (one - fx) + (b11 - b01) * fx
            gg = np.stack([(g * dx).sum(-1), (g * dy).sum(-1)], axis=-1).astype(gv.dtype, copy=False)
        return gs, gg

    return record("bilinear_sample", (source, grid), out, grad_fn)


def keypoint_window_grid(kp: Keypoint, downscale: int = 8, window: int = 5) -> np.ndarray:
    """Identity mesh grid translated to the keypoint at feature-map scale."""
    return make_identity_meshgrid(window, window) + np.array([kp.x / downscale, kp.y / downscale])


def sample_patches(
    feature_map,
    keypoints: Sequence[Keypoint],
    downscale: int = 8,
    window: int = 5,
    image_shape: tuple[int, int] | None = None,
) -> Tensor:
    """Feature windows ``(K, window, window, C)`` around each keypoint."""
    fmap = as_tensor(feature_map)
    h, w = fmap.value.shape[:2]
    H, W = image_shape if image_shape is not None else (h * downscale, w * downscale)
    for i, kp in enumerate(keypoints):
        if not (0 <= kp.x <= W - 1 and 0 <= kp.y <= H - 1):
            raise InputError(f"keypoint {i} at ({kp.x}, {kp.y}) lies outside the {W}x{H} image")
    if not keypoints:
        return Tensor(np.zeros((0, window, window, fmap.value.shape[-1]), dtype=fmap.value.dtype))
    grids = np.stack([keypoint_window_grid(kp, downscale, window) for kp in keypoints])
    return bilinear_sample(fmap, grids.astype(fmap.value.dtype), padding="zeros")


def sample_patch_for_keypoint(
    feature_map,
    kp: Keypoint,
    downscale: int = 8,
    window: int = 5,
    image_shape: tuple[int, int] | None = None,
) -> Tensor:
    """Feature window ``(window, window, C)`` centred at the downscaled keypoint."""
    out = sample_patches(feature_map, [kp], downscale, window, image_shape)
    return reshape(out, out.value.shape[1:])
