import itertools

import numpy as np
import pytest

from deal.errors import InputError
from deal.geometry import Keypoint
from deal.pipeline.detect import detect_keypoints
from deal.pipeline.matching import Match, evaluate_pair, match_nn, sweep_eval
from deal.simulator import SimConfig, generate_sweep


def kps(n):
    return [Keypoint(float(i), 0.0, 1.0) for i in range(n)]


# ---------------------------------------------------------------- detection


def blob(h, w, cx, cy, sigma):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def test_detect_constant_image_is_empty():
    assert detect_keypoints(np.full((64, 64), 0.4)) == []


@pytest.mark.parametrize("sigma", [2.0, 3.0, 5.0])
def test_detect_single_blob(sigma):
    img = blob(96, 96, 47.3, 40.6, sigma)
    out = detect_keypoints(img)
    assert out
    best = min(out, key=lambda k: np.hypot(k.x - 47.3, k.y - 40.6))
    assert np.hypot(best.x - 47.3, best.y - 40.6) < 2.0
    assert sigma / 2 <= best.size <= sigma * 2


def test_detect_is_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    img = sum(blob(80, 100, *rng.uniform([5, 5], [95, 75]), rng.uniform(1.5, 4)) for _ in range(120))
    a, b = detect_keypoints(img, 50), detect_keypoints(img, 50)
    assert a == b and len(a) == 50
    assert all(0 <= k.orientation < 2 * np.pi and k.size > 0 for k in a)
    with pytest.raises(InputError):
        detect_keypoints(np.zeros((4, 4, 3)))


# ---------------------------------------------------------------- matching


def brute_nn(a, b):
    out = []
    for i, x in enumerate(a):
        d = [np.sqrt(((x - y) ** 2).sum()) for y in b]
        out.append((i, int(np.argmin(d)), float(min(d))))
    return out


def test_match_self():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((20, 16))
    assert [(m.index_a, m.index_b, m.distance) for m in match_nn(a, a)] == [(i, i, 0.0) for i in range(20)]


def test_match_hand_built():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.0, 0.9], [1.0, 0.1], [0.9, 0.0]])
    got = [(m.index_a, m.index_b) for m in match_nn(a, b)]
    assert got == [(i, j) for i, j, _ in brute_nn(a, b)] == [(0, 2), (1, 0)]


@pytest.mark.parametrize("seed", range(5))
def test_match_equals_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((37, 8))
    b = rng.standard_normal((53, 8))
    b[7] = b[3]  # exact tie resolves to the lower index
    a[0] = b[3]
    got = [(m.index_a, m.index_b) for m in match_nn(a, b)]
    want = [(i, j) for i, j, _ in brute_nn(a, b)]
    assert got == want
    np.testing.assert_allclose([m.distance for m in match_nn(a, b)], [d for *_, d in brute_nn(a, b)], atol=1e-12)


def test_match_skips_nan_rows_and_mutual():
    a = np.array([[0.0, 0.0], [np.nan, 0.0], [5.0, 5.0]])
    b = np.array([[0.1, 0.0], [np.nan, np.nan], [0.2, 0.0]])
    got = [(m.index_a, m.index_b) for m in match_nn(a, b)]
    assert got == [(0, 0), (2, 2)]
    got = [(m.index_a, m.index_b) for m in match_nn(a, b, mutual=True)]
    assert got == [(0, 0)]


def test_match_errors():
    with pytest.raises(InputError):
        match_nn(np.zeros((0, 4)), np.zeros((3, 4)))
    with pytest.raises(InputError):
        match_nn(np.zeros((2, 4)), np.zeros((3, 5)))


# ---------------------------------------------------------------- evaluation


def test_evaluate_examples():
    gt = [(i, i, 0.5) for i in range(5)]
    r = evaluate_pair([Match(i, i, 0.0) for i in range(5)], kps(5), kps(5), gt)
    assert (r.ms, r.mma) == (1.0, 1.0)
    ms = [Match(0, 0, 0), Match(1, 1, 0), Match(2, 2, 0), Match(3, 4, 0), Match(4, 3, 0)]
    r = evaluate_pair(ms, kps(5), kps(5), gt)
    assert (r.ms, r.mma, r.n_correct) == (0.6, 0.6, 3)
    r = evaluate_pair([Match(0, 0, 0), Match(1, 1, 0)], kps(10), kps(4), [(0, 0, 1.0), (1, 1, 2.0)])
    assert r.ms == 0.5


def test_evaluate_threshold_and_errors():
    r = evaluate_pair([Match(0, 0, 0)], kps(2), kps(2), [(0, 0, 3.5)], threshold_px=3.0)
    assert r.n_correct == 0 and r.n_covisible_matches == 1
    with pytest.raises(InputError):
        evaluate_pair([Match(0, 5, 0)], kps(2), kps(2), [])
    with pytest.raises(InputError):
        evaluate_pair([], kps(2), kps(2), [(0, 7, 1.0)])


def oracle(matches, na, nb, gt, thr):
    # enumerate every (match, gt) combination
    correct = sum(1 for m, g in itertools.product(matches, gt)
                  if (m.index_a, m.index_b) == (g[0], g[1]) and g[2] <= thr)
    covis = sum(1 for m in matches if any(g[0] == m.index_a for g in gt))
    return correct, correct / min(na, nb), (correct / covis if covis else 0.0)


def random_instance(rng):
    na, nb = rng.integers(1, 21, 2)
    n_gt = rng.integers(0, min(na, nb) + 1)
    ia = rng.choice(na, n_gt, replace=False)
    ib = rng.choice(nb, n_gt, replace=False)
    gt = [(int(a), int(b), float(rng.uniform(0, 4))) for a, b in zip(ia, ib)]
    matches = [Match(i, int(rng.integers(nb)), 0.0) for i in range(na) if rng.random() < 0.8]
    for k, (a, b, _) in enumerate(gt):
        if rng.random() < 0.5:
            matches = [m for m in matches if m.index_a != a] + [Match(a, b, 0.0)]
    return matches, int(na), int(nb), gt


def test_evaluate_equals_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(200):
        matches, na, nb, gt = random_instance(rng)
        r = evaluate_pair(matches, kps(na), kps(nb), gt, 3.0)
        assert (r.n_correct, r.ms, r.mma) == oracle(matches, na, nb, gt, 3.0)


# ---------------------------------------------------------------- sweeps


@pytest.fixture(scope="module")
def rotation_sweep():
    cfg = SimConfig(width=160, height=120, texture_size=256, max_keypoints=300, warmup_steps=30)
    frames = generate_sweep(cfg, seed=2, sweep="rotation")
    entries = [{**f.manifest, "image_a": "", "image_b": "", "keypoints_a": "", "keypoints_b": "",
                "correspondences": ""} for f in frames]
    return {"pairs": entries, "threshold_px": 3.0}, frames


def test_sweep_curve_shape_and_reference(rotation_sweep):
    manifest, frames = rotation_sweep
    assert len(frames) == 19
    gray = [0.299, 0.587, 0.114]

    def raw_patch(img, keypoints):
        # orientation-ignoring descriptor: the unrotated 9x9 grey window
        g = np.pad(np.asarray(img) @ gray, 5, mode="edge")
        out = []
        for k in keypoints:
            x, y = int(round(k.x)) + 5, int(round(k.y)) + 5
            v = g[y - 4:y + 5, x - 4:x + 5].ravel()
            out.append((v - v.mean()) / (v.std() + 1e-9))
        return np.array(out).reshape(len(keypoints), 81)

    curve = sweep_eval(manifest, frames, None, "rotation", describe_fn=raw_patch)
    assert len(curve) == 19
    assert all(0 <= c <= 1 for c in curve)
    assert curve[0] == max(curve)
    assert np.mean(curve[:3]) > np.mean(curve[-3:])


def test_sweep_reference_against_itself_is_one():
    frame_kps = [Keypoint(10.0 + 7 * i, 20.0, 2.0) for i in range(6)]
    rng = np.random.default_rng(0)
    desc = rng.standard_normal((6, 4))
    from deal.simulator import PairSample

    img = np.zeros((40, 60, 3), np.float32)
    p = PairSample(img, img, frame_kps, frame_kps, [(i, i, 0.0) for i in range(6)], {})
    manifest = {"pairs": [{"sweep": "rotation", "value": 0}]}
    assert sweep_eval(manifest, [p], None, "rotation", describe_fn=lambda im, k: desc) == [1.0]


def test_sweep_errors():
    with pytest.raises(InputError):
        sweep_eval({"pairs": []}, [], None, "rotation")
    with pytest.raises(InputError):
        sweep_eval({"pairs": [{"sweep": "rotation", "value": 0}]}, [], None, "tilt")
    m = {"pairs": [{"sweep": "rotation", "value": 20}, {"sweep": "rotation", "value": 10}]}
    with pytest.raises(InputError):
        sweep_eval(m, [None, None], None, "rotation")
