"""Robust TPS tracking from point matches: affine RANSAC, then a TPS fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError, SingularSystemError
from ..geometry import TpsParams, tps_apply, tps_fit


@dataclass
class PixelTps:
    """TPS fitted in a normalised frame, applied to pixel coordinates.

    Points are mapped with ``(p - shift) / scale`` before the TPS and back
    with ``q * scale + shift`` afterwards, which keeps the bordered system
    well conditioned whatever the image size.
    """

    params: TpsParams
    shift: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        p = (np.asarray(points, dtype=np.float64) - self.shift) / self.scale
        return tps_apply(self.params, p) * self.scale + self.shift

    def to_dict(self) -> dict:
        return {
            "affine": self.params.affine.tolist(),
            "weights": self.params.weights.tolist(),
            "control_points": self.params.control_points.tolist(),
            "shift": self.shift.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PixelTps":
        params = TpsParams(np.asarray(d["affine"], float), np.asarray(d["weights"], float),
                           np.asarray(d["control_points"], float))
        return cls(params, np.asarray(d["shift"], float), float(d["scale"]))


def _as_pairs(matches) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(matches, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (2, 2):
        raise InputError(f"matches must be (N, 2, 2) point pairs, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("matches contain non-finite coordinates")
    return arr[:, 0], arr[:, 1]


def _affine_hypotheses(src, dst, samples):
    """Least-squares-exact affine maps through each 3-match sample."""
    X = np.concatenate([src[samples], np.ones(samples.shape + (1,))], axis=-1)  # (T, 3, 3)
    Y = dst[samples]                                                          # (T, 3, 2)
    det = np.linalg.det(X)
    ok = np.abs(det) > 1e-9 * (1 + np.abs(X).max(axis=(1, 2)) ** 2)
    A = np.zeros((len(samples), 3, 2))
    if ok.any():
        A[ok] = np.linalg.solve(X[ok], Y[ok])
    return A, ok


def ransac_tps_track(matches, iterations: int = 1500, inlier_px: float = 3.0, seed: int = 0,
                     regularization: float = 1e-8, refine_rounds: int = 0) -> tuple[PixelTps, np.ndarray]:
    """RANSAC over 3-match affine hypotheses, then TPS on the consensus set.

    The best hypothesis has the most inliers (first one wins ties).  With
    ``refine_rounds > 0`` the inlier set is recomputed against the TPS and the
    TPS refit that many times.  Raises :class:`SingularSystemError` when the
    consensus set cannot support a fit (e.g. all points identical).
    """
    src, dst = _as_pairs(matches)
    n = len(src)
    if n < 4:
        raise InputError(f"tracking needs at least 4 matches, got {n}")
    if iterations < 1 or inlier_px <= 0:
        raise InputError("iterations and inlier_px must be positive")
    rng = np.random.default_rng(seed)
    # three distinct indices per hypothesis
    a = rng.integers(0, n, iterations)
    b = rng.integers(0, n - 1, iterations)
    b += b >= a
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = rng.integers(0, n - 2, iterations)
    c += c >= lo
    c += c >= hi
    samples = np.stack([a, b, c], axis=1)
    A, ok = _affine_hypotheses(src, dst, samples)
    best_mask = None
    best_count = -1
    Xh = np.concatenate([src, np.ones((n, 1))], axis=1)
    for t0 in range(0, iterations, 256):
        blk = slice(t0, min(t0 + 256, iterations))
        pred = np.einsum("nk,tkj->tnj", Xh, A[blk])
        err = np.linalg.norm(pred - dst, axis=-1)
        inl = (err <= inlier_px) & ok[blk, None]
        counts = inl.sum(1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count = int(counts[j])
            best_mask = inl[j]
    if best_count < 3:
        raise SingularSystemError("no affine hypothesis reached 3 inliers")

    shift = src.mean(axis=0)
    scale = float(np.abs(src - shift).max()) or 1.0
    mask = best_mask.copy()
    for r in range(refine_rounds + 1):
        p = tps_fit((src[mask] - shift) / scale, (dst[mask] - shift) / scale, regularization)
        warp = PixelTps(p, shift, scale)
        if r == refine_rounds:
            break
        new_mask = np.linalg.norm(warp.apply(src) - dst, axis=-1) <= inlier_px
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return warp, mask
