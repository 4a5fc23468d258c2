"""Nearest-neighbour matching and the MS / MMA evaluation harness."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InputError
from ..geometry import Keypoint


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T


def _nearest(a: np.ndarray, b: np.ndarray, chunk: int = 512):
    """Exact argmin of L2 distance per row of ``a`` (ties -> lowest index).

    A GEMM pass finds candidates; the near-minimal ones are then re-scored with
    explicit differences so the result equals exhaustive search.
    """
    idx = np.empty(len(a), np.int64)
    dist = np.empty(len(a))
    bad_b = ~np.isfinite(b).all(1)
    bz = np.where(bad_b[:, None], 0.0, b)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = _pairwise_sq(blk, bz)
        d2[:, bad_b] = np.inf
        best = d2.min(1)
        slack = 1e-9 * (1.0 + np.abs(best))
        for r in range(len(blk)):
            cand = np.flatnonzero(d2[r] <= best[r] + slack[r])
            diff = b[cand] - blk[r]
            exact = np.sqrt((diff * diff).sum(1))
            j = int(np.argmin(exact))
            idx[s + r] = cand[j]
            dist[s + r] = exact[j]
    return idx, dist


def match_nn(desc_a, desc_b, mutual: bool = False) -> list[Match]:
    """Nearest neighbour in B for every descriptor of A.

    Rows containing NaN (keypoints that could not be described) never match
    and are never matched.  With ``mutual=True`` only pairs that are each
    other's nearest neighbour are kept.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise InputError("match_nn needs two non-empty (N, D) descriptor sets")
    if a.shape[1] != b.shape[1]:
        raise InputError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    ok_a = np.isfinite(a).all(1)
    ok_b = np.isfinite(b).all(1)
    if not ok_b.any():
        return []
    rows = np.flatnonzero(ok_a)
    idx, dist = _nearest(a[rows], b)
    if mutual:
        cols = np.flatnonzero(ok_b)
        back, _ = _nearest(b[cols], np.where(ok_a[:, None], a, np.nan))
        back_of = dict(zip(cols.tolist(), back.tolist()))
        keep = np.array([back_of[j] == i for i, j in zip(rows, idx)], bool)
        rows, idx, dist = rows[keep], idx[keep], dist[keep]
    return [Match(int(i), int(j), float(d)) for i, j, d in zip(rows, idx, dist)]


@dataclass
class PairReport:
    ms: float
    mma: float
    n_correct: int
    n_matches: int
    n_covisible_matches: int
    n_keypoints_a: int
    n_keypoints_b: int


@dataclass
class EvalReport:
    pairs: list[PairReport] = field(default_factory=list)
    threshold_px: float = 3.0

    @property
    def mean_ms(self) -> float:
        return float(np.mean([p.ms for p in self.pairs])) if self.pairs else 0.0

    @property
    def mean_mma(self) -> float:
        return float(np.mean([p.mma for p in self.pairs])) if self.pairs else 0.0

    def to_dict(self) -> dict:
        return {
            "threshold_px": self.threshold_px,
            "mean_ms": self.mean_ms,
            "mean_mma": self.mean_mma,
            "mma_basis": "matches whose source keypoint has a covisible ground-truth partner",
            "pairs": [asdict(p) for p in self.pairs],
        }


def evaluate_pair(matches: Sequence[Match], keypoints_a: Sequence[Keypoint], keypoints_b: Sequence[Keypoint],
                  ground_truth: Sequence[tuple[int, int, float]], threshold_px: float = 3.0) -> PairReport:
    """Score one image pair.

    A match is correct iff ``(index_a, index_b)`` is a ground-truth pair whose
    transfer distance is within ``threshold_px``.  MS divides the correct
    count by the smaller keypoint count; MMA divides it by the number of
    matches whose source keypoint appears in the ground truth.
    """
    na, nb = len(keypoints_a), len(keypoints_b)
    gt: dict[int, tuple[int, float]] = {}
    for ia, ib, d in ground_truth:
        if not (0 <= ia < na and 0 <= ib < nb):
            raise InputError(f"ground-truth pair ({ia}, {ib}) out of range for {na}/{nb} keypoints")
        if ia in gt:
            raise InputError(f"keypoint {ia} appears twice in the ground truth")
        gt[ia] = (ib, d)
    correct = covis = 0
    for m in matches:
        if not (0 <= m.index_a < na and 0 <= m.index_b < nb):
            raise InputError(f"match ({m.index_a}, {m.index_b}) out of range for {na}/{nb} keypoints")
        if m.index_a in gt:
            covis += 1
            ib, d = gt[m.index_a]
            if ib == m.index_b and d <= threshold_px:
                correct += 1
    denom = min(na, nb)
    ms = correct / denom if denom else 0.0
    mma = correct / covis if covis else 0.0
    return PairReport(ms, mma, correct, len(matches), covis, na, nb)


def describe_and_evaluate(pairs, weights, threshold_px: float = 3.0, mutual: bool = False) -> EvalReport:
    """Describe both images of every pair, match A -> B and score."""
    from ..network import describe

    report = EvalReport(threshold_px=threshold_px)
    for p in pairs:
        da = describe(p.image_a, None, p.keypoints_a, weights).descriptors
        db = describe(p.image_b, None, p.keypoints_b, weights).descriptors
        matches = match_nn(da, db, mutual) if len(da) and len(db) else []
        report.pairs.append(evaluate_pair(matches, p.keypoints_a, p.keypoints_b, p.correspondences, threshold_px))
    return report


def sweep_eval(manifest: dict, pairs, weights, sweep: str, threshold_px: float | None = None,
               describe_fn=None) -> list[float]:
    """Per-frame MS of a rotation or scale sweep, in sweep order.

    ``manifest["pairs"]`` entries must carry ``sweep`` and ``value`` keys and
    pair the reference frame (image A) with each target frame (image B).
    ``describe_fn(image, keypoints) -> (K, D)`` overrides the model.
    """
    from ..network import describe

    if sweep not in ("rotation", "scale"):
        raise InputError(f"unknown sweep {sweep!r}")
    entries = manifest.get("pairs", [])
    sel = [i for i, e in enumerate(entries) if e.get("sweep") == sweep]
    if not sel:
        raise InputError(f"manifest holds no {sweep} frames")
    values = [entries[i]["value"] for i in sel]
    if any(b < a for a, b in zip(values, values[1:])):
        raise InputError("sweep frames are not ordered by their parameter")
    if len(pairs) != len(entries):
        raise InputError("frame data does not match the manifest")
    thr = threshold_px if threshold_px is not None else manifest.get("threshold_px", 3.0)
    if describe_fn is None:
        def describe_fn(img, kps):
            return describe(img, None, kps, weights).descriptors
    curve = []
    ref_desc = None
    for i in sel:
        p = pairs[i]
        if ref_desc is None:
            ref_desc = describe_fn(p.image_a, p.keypoints_a)
        db = describe_fn(p.image_b, p.keypoints_b)
        matches = match_nn(ref_desc, db) if len(ref_desc) and len(db) else []
        curve.append(evaluate_pair(matches, p.keypoints_a, p.keypoints_b, p.correspondences, thr).ms)
    return curve
