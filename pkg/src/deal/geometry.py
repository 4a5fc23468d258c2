"""Coordinate grids, keypoint frames and thin-plate-spline warps.

Points are ``(x, y)`` pairs in pixels (origin at the top-left pixel centre,
x to the right, y downward).  A sample grid is an array of shape
``(rows, cols, 2)``.

TPS warps of keypoint patches live in a normalised frame: the unit disc of the
polar grid, axis-aligned with the image and scaled so that the patch support
radius is 1.  Control points tile ``[-1, 1]^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, record
from .errors import InputError, SingularSystemError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Keypoint:
    """Detected interest point: location (px), support size (px), orientation (rad)."""

    x: float
    y: float
    size: float
    orientation: float = 0.0

    def __post_init__(self):
        if not np.isfinite([self.x, self.y, self.size, self.orientation]).all():
            raise InputError(f"keypoint has non-finite attributes: {self}")


# ---------------------------------------------------------------- grids


def make_identity_meshgrid(rows: int, cols: int) -> np.ndarray:
    """Integer-spaced lattice centred at the origin, ``(rows, cols, 2)``."""
    if rows < 1 or cols < 1:
        raise InputError("meshgrid dims must be >= 1")
    xs = np.arange(cols, dtype=np.float64) - (cols - 1) / 2.0
    ys = np.arange(rows, dtype=np.float64) - (rows - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def affine_transform_grid(affine: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Map every point ``p`` to ``A[:, :2] @ p + A[:, 2]``."""
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (2, 3):
        raise InputError(f"affine map must be 2x3, got {affine.shape}")
    grid = np.asarray(grid, dtype=np.float64)
    return grid @ affine[:, :2].T + affine[:, 2]


def translation_affine(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]])


def _bin_angles(orientation: float, bins: int) -> np.ndarray:
    # Split the orientation into whole bins plus a remainder so that shifting
    # it by k bins permutes the rows exactly.
    step = TWO_PI / bins
    whole = int(np.round(orientation / step))
    frac = orientation - whole * step
    idx = (np.arange(bins) + whole) % bins
    return frac + step * idx


def _radii(radial_bins: int, spacing: str) -> np.ndarray:
    r = np.arange(radial_bins, dtype=np.float64)
    if spacing == "linear":
        return (r + 1) / radial_bins
    if spacing == "log":
        if radial_bins == 1:
            return np.ones(1)
        return (1.0 / radial_bins) ** ((radial_bins - 1 - r) / (radial_bins - 1))
    raise InputError(f"unknown radial spacing {spacing!r}")


def polar_unit_grid(
    orientation: float,
    angular_bins: int = 32,
    radial_bins: int = 32,
    radial_spacing: str = "linear",
) -> np.ndarray:
    """Polar grid in the normalised frame: row ``a`` is the ray at angle
    ``orientation + 2*pi*a/angular_bins``, column ``r`` its ``r``-th ring."""
    if angular_bins < 2 or radial_bins < 2:
        raise InputError("polar grid needs at least 2 bins per axis")
    phi = _bin_angles(orientation, angular_bins)
    rho = _radii(radial_bins, radial_spacing)
    return np.stack(
        [np.cos(phi)[:, None] * rho[None, :], np.sin(phi)[:, None] * rho[None, :]],
        axis=-1,
    )


def cartesian_unit_grid(orientation: float, rows: int = 32, cols: int = 32) -> np.ndarray:
    """Regular grid over ``[-1, 1]^2`` rotated by ``orientation``."""
    base = make_identity_meshgrid(rows, cols)
    base = base / np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    c, s = np.cos(orientation), np.sin(orientation)
    return base @ np.array([[c, -s], [s, c]]).T


def unit_to_pixels(unit: np.ndarray, kp: Keypoint, support_factor: float = 1.0) -> np.ndarray:
    radius = kp.size * support_factor
    return np.array([kp.x, kp.y], dtype=unit.dtype) + unit.dtype.type(radius) * unit


def make_polar_grid(
    kp: Keypoint,
    angular_bins: int = 32,
    radial_bins: int = 32,
    radial_spacing: str = "linear",
    support_factor: float = 1.0,
) -> np.ndarray:
    """Identity polar sampling grid of a keypoint, in pixels.

    The outermost ring has radius ``kp.size * support_factor``.
    """
    if kp.size <= 0:
        raise InputError("keypoint size must be positive")
    if support_factor <= 0:
        raise InputError("support_factor must be positive")
    unit = polar_unit_grid(kp.orientation, angular_bins, radial_bins, radial_spacing)
    return unit_to_pixels(unit, kp, support_factor)


def control_points_lattice(n_side: int = 8) -> np.ndarray:
    """``n_side**2`` control points on a regular lattice over ``[-1, 1]^2``."""
    if n_side < 2:
        raise InputError("control lattice needs n_side >= 2")
    t = np.linspace(-1.0, 1.0, n_side)
    gx, gy = np.meshgrid(t, t)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


# ---------------------------------------------------------------- TPS


def tps_kernel(s, literal: bool = False):
    """Radial basis of the spline evaluated at a *squared* distance ``s``.

    The canonical kernel is ``s * log(s)`` (that is ``d^2 log d^2``), with the
    limit value 0 at ``s = 0``.  ``literal=True`` instead composes
    ``r^2 log r`` with ``r = s``, giving ``s^2 log s``.
    """
    s = np.asarray(s, dtype=np.float64) if not isinstance(s, np.ndarray) else s
    if (s < 0).any():
        raise InputError("tps_kernel: squared distance must be non-negative")
    safe = np.where(s > 0, s, 1)
    out = s * np.log(safe)
    if literal:
        out = s * out
    return out[()] if out.ndim == 0 else out


def _tps_kernel_deriv(s: np.ndarray, literal: bool = False) -> np.ndarray:
    safe = np.where(s > 0, s, 1)
    if literal:
        d = 2 * s * np.log(safe) + s
    else:
        d = np.log(safe) + 1
    return np.where(s > 0, d, 0)


@dataclass
class TpsParams:
    """Affine part ``A`` (2x3) plus per-control-point weights ``w_k``."""

    affine: np.ndarray
    weights: np.ndarray
    control_points: np.ndarray

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.control_points = np.asarray(self.control_points, dtype=np.float64)
        n = self.control_points.shape[0]
        if self.affine.shape != (2, 3) or self.weights.shape != (n, 2) or self.control_points.shape != (n, 2):
            raise InputError("TpsParams: inconsistent dims")

    @property
    def n(self) -> int:
        return self.control_points.shape[0]

    @classmethod
    def identity(cls, control_points: np.ndarray | None = None) -> "TpsParams":
        cp = control_points_lattice(8) if control_points is None else np.asarray(control_points)
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.zeros((len(cp), 2)), cp)

    @classmethod
    def from_offsets(cls, theta: np.ndarray, control_points: np.ndarray | None = None) -> "TpsParams":
        """Identity parameters plus a regressor output vector.

        Layout of ``theta``: 6 affine offsets (row-major 2x3), then the weights
        row-major ``(n, 2)``.
        """
        cp = control_points_lattice(8) if control_points is None else np.asarray(control_points)
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.size != 6 + 2 * len(cp):
            raise InputError(f"theta has {theta.size} entries, expected {6 + 2 * len(cp)}")
        ident = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        return cls(ident + theta[:6].reshape(2, 3), theta[6:].reshape(-1, 2), cp)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.affine, [[1, 0, 0], [0, 1, 0]]) and not self.weights.any())


def tps_apply(params: TpsParams, points: np.ndarray, literal_kernel: bool = False) -> np.ndarray:
    """Warp points ``(..., 2)`` with ``q' = A q + sum_k U(|q - c_k|^2) w_k``."""
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    out = flat @ params.affine[:, :2].T + params.affine[:, 2]
    if params.weights.any():
        d = flat[:, None, :] - params.control_points[None, :, :]
        U = tps_kernel((d * d).sum(-1), literal=literal_kernel)
        out = out + U @ params.weights
    return out.reshape(pts.shape)


def tps_warp(
    theta: Tensor,
    unit_grid,
    control_points: np.ndarray,
    literal_kernel: bool = False,
) -> Tensor:
    """Differentiable batched TPS over per-keypoint grids.

    ``theta`` holds regressor offsets ``(K, 6 + 2n)`` added to the identity
    parameters.  ``unit_grid`` is ``(K, ..., 2)`` in the normalised frame; the
    result has the same dims.  Gradients flow to both ``theta`` and the grid.
    With ``theta == 0`` the output equals the grid bit-exactly.
    """
    theta = as_tensor(theta)
    grid = as_tensor(unit_grid)
    tv, gv = theta.value, grid.value
    K = tv.shape[0]
    n = control_points.shape[0]
    if tv.ndim != 2 or tv.shape[1] != 6 + 2 * n:
        raise InputError(f"tps_warp: theta dims {tv.shape}, expected (K, {6 + 2 * n})")
    if gv.shape[0] != K or gv.shape[-1] != 2:
        raise InputError(f"tps_warp: grid dims {gv.shape} do not match {K} keypoints")
    dtype = np.result_type(tv.dtype, gv.dtype)
    q = gv.reshape(K, -1, 2).astype(dtype, copy=False)
    lin = tv[:, :6].reshape(K, 2, 3).astype(dtype, copy=False)
    W = tv[:, 6:].reshape(K, n, 2).astype(dtype, copy=False)
    cp = control_points.astype(dtype)

    A = lin[:, :, :2] + np.eye(2, dtype=dtype)
    out = np.einsum("kpj,kij->kpi", q, A) + lin[:, None, :, 2]
    diff = q[:, :, None, :] - cp[None, None, :, :]
    S = (diff * diff).sum(-1)
    U = tps_kernel(S, literal=literal_kernel).astype(dtype, copy=False)
    out = out + U @ W
    out = out.reshape(gv.shape)

    def grad_fn(g):
        g = g.reshape(K, -1, 2)
        gt = None
        if theta.requires_grad:
            gA = np.einsum("kpi,kpj->kij", g, q)
            gtr = g.sum(axis=1)
            gW = np.einsum("kpn,kpi->kni", U, g)
            gt = np.concatenate(
                [np.concatenate([gA, gtr[:, :, None]], axis=2).reshape(K, 6), gW.reshape(K, 2 * n)],
                axis=1,
            ).astype(tv.dtype, copy=False)
        gq = None
        if grid.requires_grad:
            gq = np.einsum("kpi,kij->kpj", g, A)
            gw_dot = np.einsum("kpi,kni->kpn", g, W)
            coef = 2 * gw_dot * _tps_kernel_deriv(S, literal_kernel)
            gq = gq + np.einsum("kpn,kpnj->kpj", coef, diff)
            gq = gq.reshape(gv.shape).astype(gv.dtype, copy=False)
        return gt, gq

    return record("tps_warp", (theta, grid), out, grad_fn)


def tps_fit(src, dst, regularization: float = 0.0, literal_kernel: bool = False) -> TpsParams:
    """Fit a TPS mapping ``src`` onto ``dst``; ``src`` become the control points.

    Solves the standard bordered system with side conditions
    ``sum w = 0`` and ``sum w c^T = 0``.  With zero regularisation the fit
    interpolates.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise InputError("tps_fit: src and dst must have equal length")
    if regularization < 0:
        raise InputError("tps_fit: regularization must be >= 0")
    n = len(src)
    if n < 3:
        raise SingularSystemError("tps_fit: need at least 3 points")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise InputError("tps_fit: non-finite points")
    centred = src - src.mean(axis=0)
    scale = np.abs(centred).max()
    if scale == 0 or np.linalg.matrix_rank(centred / scale, tol=1e-9) < 2:
        raise SingularSystemError("tps_fit: source points are collinear or coincident")
    if regularization == 0 and len(np.unique(src, axis=0)) < n:
        raise SingularSystemError("tps_fit: duplicate source points")

    d = src[:, None, :] - src[None, :, :]
    Kmat = tps_kernel((d * d).sum(-1), literal=literal_kernel) + regularization * np.eye(n)
    P = np.hstack([np.ones((n, 1)), src])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = Kmat
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"tps_fit: {exc}") from None
    if not np.isfinite(sol).all() or np.linalg.cond(L) > 1e14:
        raise SingularSystemError("tps_fit: system is numerically singular")
    w = sol[:n]
    a = sol[n:]  # rows: constant, x coefficient, y coefficient
    affine = np.array([[a[1, 0], a[2, 0], a[0, 0]], [a[1, 1], a[2, 1], a[0, 1]]])
    return TpsParams(affine, w, src.copy())
