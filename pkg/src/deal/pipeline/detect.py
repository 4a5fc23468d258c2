"""Difference-of-Gaussians keypoint detector.

Plumbing only: a compact SIFT-like detector so that the pipeline can run on
raw images.  Keypoint ``size`` is the Gaussian scale (sigma, in pixels) of the
detected blob and ``orientation`` the dominant local gradient direction in
radians, measured from +x towards +y in image coordinates.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import InputError
from ..geometry import Keypoint

SIGMA0 = 1.6
INTERVALS = 3
CONTRAST = 0.01
EDGE_RATIO = 10.0
ORI_BINS = 36


def _octave_stack(base: np.ndarray, sigma0: float, intervals: int):
    k = 2.0 ** (1.0 / intervals)
    sigmas = [sigma0 * k**i for i in range(intervals + 3)]
    gauss = [ndimage.gaussian_filter(base, sigmas[0], mode="nearest")]
    for i in range(1, len(sigmas)):
        inc = np.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
        gauss.append(ndimage.gaussian_filter(gauss[-1], inc, mode="nearest"))
    gauss = np.stack(gauss)
    return gauss, gauss[1:] - gauss[:-1], sigmas


def _refine(dog: np.ndarray, s, y, x):
    """One Newton step of a quadratic fit around integer extrema."""
    c = dog[s, y, x]
    ds = (dog[s + 1, y, x] - dog[s - 1, y, x]) / 2
    dy = (dog[s, y + 1, x] - dog[s, y - 1, x]) / 2
    dx = (dog[s, y, x + 1] - dog[s, y, x - 1]) / 2
    dss = dog[s + 1, y, x] - 2 * c + dog[s - 1, y, x]
    dyy = dog[s, y + 1, x] - 2 * c + dog[s, y - 1, x]
    dxx = dog[s, y, x + 1] - 2 * c + dog[s, y, x - 1]
    dxy = (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1]) / 4
    dxs = (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1] - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1]) / 4
    dys = (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x] - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x]) / 4
    Hm = np.stack([
        np.stack([dxx, dxy, dxs], -1),
        np.stack([dxy, dyy, dys], -1),
        np.stack([dxs, dys, dss], -1),
    ], -2)
    g = np.stack([dx, dy, ds], -1)
    off = np.zeros_like(g)
    ok = np.abs(np.linalg.det(Hm)) > 1e-12
    if ok.any():
        off[ok] = -np.linalg.solve(Hm[ok], g[ok][..., None])[..., 0]
    off = np.clip(off, -0.5, 0.5)
    val = c + 0.5 * (g * off).sum(-1)
    # principal curvature ratio on the 2x2 spatial Hessian
    tr, det = dxx + dyy, dxx * dyy - dxy**2
    edge_ok = (det > 0) & (tr**2 * EDGE_RATIO < (EDGE_RATIO + 1) ** 2 * det)
    return off, val, edge_ok


def _orientations(gauss_img: np.ndarray, xs, ys, sigmas) -> np.ndarray:
    gy, gx = np.gradient(gauss_img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    H, W = gauss_img.shape
    out = np.zeros(len(xs))
    for i, (x, y, sg) in enumerate(zip(xs, ys, sigmas)):
        ws = 1.5 * sg
        rad = int(round(3 * ws))
        xi, yi = int(round(x)), int(round(y))
        x0, x1 = max(xi - rad, 0), min(xi + rad + 1, W)
        y0, y1 = max(yi - rad, 0), min(yi + rad + 1, H)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        wgt = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * ws * ws)) * mag[y0:y1, x0:x1]
        b = np.floor((ang[y0:y1, x0:x1] + np.pi) / (2 * np.pi) * ORI_BINS).astype(int) % ORI_BINS
        hist = np.bincount(b.ravel(), wgt.ravel(), ORI_BINS)
        hist = np.convolve(np.concatenate([hist[-1:], hist, hist[:1]]), [1 / 3, 1 / 3, 1 / 3], "valid")
        j = int(np.argmax(hist))
        l, c, r = hist[j - 1], hist[j], hist[(j + 1) % ORI_BINS]
        den = l - 2 * c + r
        frac = 0.5 * (l - r) / den if den != 0 else 0.0
        theta = (j + 0.5 + frac) / ORI_BINS * 2 * np.pi - np.pi
        out[i] = np.mod(theta, 2 * np.pi)
    return out


def detect_keypoints(image, max_n: int = 2048, contrast: float = CONTRAST) -> list[Keypoint]:
    """Multi-scale DoG extrema with dominant-gradient orientation.

    Keypoints are ranked by absolute DoG response (ties by row, then column)
    and the strongest ``max_n`` are returned.  Deterministic.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"detect_keypoints expects a grayscale (H, W) image, got {img.shape}")
    if max_n < 0:
        raise InputError("max_n must be non-negative")
    if not np.isfinite(img).all():
        raise InputError("image contains non-finite values")
    H, W = img.shape
    cands = []
    base = img
    scale = 1.0
    while min(base.shape) >= 16:
        gauss, dog, sigmas = _octave_stack(base, SIGMA0, INTERVALS)
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        ext = ((dog == mx) | (dog == mn)) & (np.abs(dog) > 0.8 * contrast)
        ext[0] = ext[-1] = False
        ext[:, :1] = ext[:, -1:] = False
        ext[:, :, :1] = ext[:, :, -1:] = False
        s, y, x = np.nonzero(ext)
        if len(s):
            off, val, edge_ok = _refine(dog, s, y, x)
            keep = edge_ok & (np.abs(val) > contrast)
            s, y, x, off, val = s[keep], y[keep], x[keep], off[keep], val[keep]
            sig_oct = SIGMA0 * 2.0 ** ((s + off[:, 2]) / INTERVALS)
            xs = x + off[:, 0]
            ys = y + off[:, 1]
            ori = np.zeros(len(s))
            for level in np.unique(s):
                m = s == level
                ori[m] = _orientations(gauss[level], xs[m], ys[m], sig_oct[m])
            # map back to input pixel coordinates (pixel centres at integers)
            px = (xs + 0.5) * scale - 0.5
            py = (ys + 0.5) * scale - 0.5
            for i in range(len(s)):
                cands.append((-abs(val[i]), py[i], px[i], sig_oct[i] * scale, ori[i]))
        base = gauss[INTERVALS][::2, ::2]
        scale *= 2.0
    cands.sort()
    out = []
    for negr, y, x, size, ori in cands:
        if len(out) >= max_n:
            break
        if 0 <= x <= W - 1 and 0 <= y <= H - 1:
            out.append(Keypoint(float(x), float(y), float(size), float(ori)))
    return out
