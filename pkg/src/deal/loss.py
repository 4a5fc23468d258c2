"""Hardest-in-batch margin ranking loss over corresponding descriptor batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, record
from .errors import InputError

# Below this distance the square-root gradient is treated as zero.
_DIST_FLOOR = 1e-6


def distance_matrix(A, B, tol: float = 1e-4) -> Tensor:
    """Euclidean distances between unit-norm rows, ``sqrt(max(0, 2 - 2 A B^T))``."""
    A, B = as_tensor(A), as_tensor(B)
    av, bv = A.value, B.value
    if av.ndim != 2 or av.shape != bv.shape:
        raise InputError(f"descriptor batches must be equal (N, D) arrays, got {av.shape} and {bv.shape}")
    for name, v in (("A", av), ("B", bv)):
        norms = np.sqrt((v.astype(np.float64) ** 2).sum(axis=1))
        if np.abs(norms - 1).max(initial=0) > tol:
            raise InputError(f"rows of {name} are not unit-norm")
    dot = av @ bv.T
    D = np.sqrt(np.maximum(0, 2 - 2 * dot))

    def grad_fn(g):
        # dD/ddot = -1/D, zeroed where the distance (nearly) vanishes
        coef = np.where(D > _DIST_FLOOR, -g / np.maximum(D, _DIST_FLOOR), 0).astype(av.dtype)
        ga = coef @ bv if A.requires_grad else None
        gb = coef.T @ av if B.requires_grad else None
        return ga, gb

    return record("distance_matrix", (A, B), D, grad_fn)


@dataclass
class MiningResult:
    positives: np.ndarray
    hardest: np.ndarray
    hardest_index: np.ndarray
    distances: Tensor | None = None
    symmetric_from_column: np.ndarray | None = None


def mine_hardest(D, alpha: float = 10.0, symmetric: bool = False) -> MiningResult:
    """Positive distances (diagonal) and hardest negatives per row of ``D + alpha I``.

    Ties resolve to the lowest column index.  With ``symmetric=True`` the
    hardest negative of row ``i`` is the smaller of its row and column minima.
    """
    Dt = D if isinstance(D, Tensor) else None
    Dv = np.asarray(D.value if isinstance(D, Tensor) else D, dtype=np.float64)
    if Dv.ndim != 2 or Dv.shape[0] != Dv.shape[1]:
        raise InputError(f"distance matrix must be square, got {Dv.shape}")
    N = Dv.shape[0]
    if N < 2:
        raise InputError("hardest-negative mining needs N >= 2")
    if alpha < 2:
        raise InputError("alpha must be >= 2 to shield the diagonal")
    Dp = Dv + alpha * np.eye(N)
    idx = np.argmin(Dp, axis=1)
    hardest = Dp[np.arange(N), idx]
    from_col = None
    if symmetric:
        cidx = np.argmin(Dp, axis=0)
        chard = Dp[cidx, np.arange(N)]
        from_col = chard < hardest
        idx = np.where(from_col, cidx, idx)
        hardest = np.where(from_col, chard, hardest)
    return MiningResult(np.diag(Dv).copy(), hardest, idx, Dt, from_col)


def triplet_margin_loss(m: MiningResult, margin: float = 0.5) -> Tensor:
    """Mean of ``max(0, margin + d_pos - d_hardest)``.

    When the mining result carries its distance tensor, gradients flow back
    through the selected positive and hardest-negative entries.
    """
    if margin <= 0:
        raise InputError("margin must be positive")
    terms = margin + m.positives - m.hardest
    active = terms > 0
    N = len(terms)
    value = np.where(active, terms, 0).mean()
    if m.distances is None:
        return Tensor(np.asarray(value))
    D = m.distances
    rows = np.arange(N)
    col_sel = m.symmetric_from_column if m.symmetric_from_column is not None else np.zeros(N, bool)

    def grad_fn(g):
        gd = np.zeros_like(D.value)
        w = (float(g) / N) * active
        gd[rows, rows] += w
        r = np.where(col_sel, m.hardest_index, rows)
        c = np.where(col_sel, rows, m.hardest_index)
        np.add.at(gd, (r, c), -w)
        return (gd,)

    return record("triplet_margin_loss", (D,), np.asarray(value, dtype=D.value.dtype), grad_fn)


def hardest_triplet_loss(A, B, margin: float = 0.5, alpha: float = 10.0, symmetric: bool = False) -> Tensor:
    """Convenience chain: distances, mining and margin loss."""
    D = distance_matrix(A, B)
    return triplet_margin_loss(mine_hardest(D, alpha, symmetric), margin)
