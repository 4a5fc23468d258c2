"""Acceptance criteria 1-10.

Each test appends one ``criterion N: PASS|FAIL ...`` line to the shared log,
printed in the terminal summary; running this file as a script prints the same
lines directly.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import Delaunay

from deal import diffcore as dc
from deal.geometry import Keypoint, control_points_lattice, tps_apply, tps_fit, tps_warp
from deal.loss import hardest_triplet_loss
from deal.network import ArchConfig, ModelWeights, describe, describe_tensor, fixed_polar_variant, init_weights
from deal.pipeline import io as dio
from deal.pipeline.matching import Match, describe_and_evaluate, evaluate_pair
from deal.pipeline.tracking import ransac_tps_track
from deal.pipeline.training import TrainConfig, train
from deal.sampler import bilinear_sample
from deal.simulator import SimConfig, WindField, generate_pair, init_cloth, neighbor_deviation, simulate, transfer_points


def report(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def scene():
    # one rendered textured cloth shared by criteria 3, 4 and 7
    return generate_pair(SimConfig(width=320, height=240, texture_size=512, max_keypoints=400), seed=11)


# ---------------------------------------------------------------- 1


TINY = ArchConfig(encoder_channels=(2, 3, 4), regressor_hidden=(6,), dropout=0.0, control_side=2,
                  angular_bins=8, radial_bins=8, head_channels=(2, 3, 4), support_factor=2.0, min_image_side=16)


def _smooth_image(h, w, seed):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = sum(np.sin(fx * xs + fy * ys + ph) for fx, fy, ph in rng.uniform([0.02, 0.02, 0], [0.12, 0.12, 6.28], (6, 3)))
    return (img - img.min()) / (img.max() - img.min())


def _end_to_end_check():
    w = init_weights(TINY, 0)
    rng = np.random.default_rng(100)
    for k, t in w.params.items():
        t.value = t.value.astype(np.float64)
        if k.startswith("regressor.fc1"):
            t.value = 0.05 * rng.standard_normal(t.value.shape)
    img = _smooth_image(32, 32, 9)
    img_b = np.roll(img, 1, axis=1)
    kps = [Keypoint(12.3, 14.1, 2.2, 0.4), Keypoint(20.2, 18.7, 1.9, 2.1), Keypoint(16.6, 9.4, 2.5, 4.0)]
    names = ["regressor.fc1.weight", "encoder.stage2.down.kernel", "head.conv4.kernel", "head.collapse.weight"]

    def f(*tensors):
        params = dict(w.params)
        params.update(zip(names, tensors))
        mw = ModelWeights(w.config, params, {k: dc.NormState(v.mean.copy(), v.var.copy()) for k, v in w.norms.items()})
        return hardest_triplet_loss(describe_tensor(img, None, kps, mw, mode="train"),
                                    describe_tensor(img_b, None, kps, mw, mode="train"), margin=2.0)

    return dc.gradient_check(f, [w.params[n].value for n in names], h=1e-6).max_rel_error


def test_criterion_1_gradients(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    r = rng.standard_normal
    cp = control_points_lattice(3)
    checks = {
        "conv2d": (lambda x, k, b: dc.conv2d(x, k, b, stride=2), [r((6, 6, 2)), r((3, 3, 2, 4)), r(4)]),
        "conv2d_circular": (lambda x, k: dc.conv2d(x, k, padding="circular_axis0"), [r((6, 5, 2)), r((3, 3, 2, 3))]),
        "dense": (dc.dense, [r((3, 4)), r((5, 4)), r(5)]),
        "normalize_l2": (dc.normalize_l2, [r((3, 16))]),
        "pool_angular_mean": (dc.pool_angular_mean, [r((2, 8, 3, 2))]),
        "bilinear_sample": (bilinear_sample, [r((7, 9, 2)), rng.uniform([0.2, 0.2], [7.8, 5.8], (4, 5, 2))]),
        "tps_apply": (lambda t, g: tps_warp(t, g, cp), [0.1 * r((2, 6 + 2 * len(cp))), rng.uniform(-1, 1, (2, 4, 3, 2))]),
        "loss_chain": (lambda x, y: hardest_triplet_loss(dc.normalize_l2(x), dc.normalize_l2(y), margin=1.5),
                       [r((6, 5)), r((6, 5))]),
    }
    errs = {}
    for name, (fn, args) in checks.items():
        h = 1e-4 if name == "bilinear_sample" else 1e-6
        errs[name] = dc.gradient_check(fn, args, h=h).max_rel_error
    e2e = _end_to_end_check()
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-5 and e2e < 1e-4 and dt < 120
    worst = max(errs, key=errs.get)
    report(acceptance_log, 1, ok, f"worst op {worst} rel {errs[worst]:.2e}, end-to-end rel {e2e:.2e}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_tps_exactness(acceptance_log):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        src = rng.uniform(-1, 1, (12, 2))
        dst = src + 0.3 * rng.standard_normal((12, 2))
        p = tps_fit(src, dst, regularization=0.0)
        worst = max(worst, np.abs(tps_apply(p, src) - dst).max(), np.abs(p.weights.sum(0)).max(),
                    np.abs(p.weights.T @ p.control_points).max())
    ok = worst < 1e-8
    report(acceptance_log, 2, ok, f"max residual / side condition {worst:.2e} over 100 instances")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_identity_at_init(acceptance_log, scene):
    rng = np.random.default_rng(3)
    img = scene.image_a
    kps = [Keypoint(*rng.uniform([60, 60], [260, 180]), rng.uniform(1.5, 4.0), rng.uniform(0, 2 * np.pi))
           for _ in range(50)]
    w = init_weights(ArchConfig(), seed=3)
    a = describe(img, None, kps, w).descriptors
    b = describe(img, None, kps, fixed_polar_variant(w)).descriptors
    diff = float(np.abs(a - b).max())
    ok = np.isfinite(a).all() and diff == 0.0
    report(acceptance_log, 3, ok, f"max abs diff {diff} on 50 keypoints")
    assert ok


# ---------------------------------------------------------------- 4


def _rotate_image(img, phi, centre):
    # J(p) = I(R^T (p - c) + c), cubic interpolation per channel
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(phi), np.sin(phi)
    dx, dy = xs - centre[0], ys - centre[1]
    sx = c * dx + s * dy + centre[0]
    sy = -s * dx + c * dy + centre[1]
    chans = [ndimage.map_coordinates(img[..., k].astype(np.float64), [sy, sx], order=3, mode="reflect")
             for k in range(img.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0, 1)


def test_criterion_4_rotation_invariance(acceptance_log, scene):
    img = scene.image_a.astype(np.float64)
    centre = np.array([160.0, 120.0])
    kps = [k for k in scene.keypoints_a if np.hypot(k.x - centre[0], k.y - centre[1]) < 50 and k.size < 4][:20]
    assert len(kps) >= 10
    w = init_weights(ArchConfig(), seed=4)
    # a non-trivial warp for the orientation part: perturb the zero-initialised layer
    wp = w.copy()
    last = f"regressor.fc{len(w.config.regressor_hidden)}"
    wp.params[last + ".bias"].value = 0.05 * np.random.default_rng(4).standard_normal(w.config.theta_dim)
    shift_err = 0.0
    for weights in (w, wp):
        base = describe(img, None, kps, weights).descriptors
        for k in range(1, 8):
            moved = [replace(kp, orientation=(kp.orientation + k * np.pi / 4) % (2 * np.pi)) for kp in kps]
            shift_err = max(shift_err, np.linalg.norm(describe(img, None, moved, weights).descriptors - base, axis=1).max())

    phi = np.pi / 4
    rot = _rotate_image(img, phi, centre)
    R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    kps_rot = []
    for kp in kps:
        x, y = R @ (np.array([kp.x, kp.y]) - centre) + centre
        kps_rot.append(Keypoint(x, y, kp.size, (kp.orientation + phi) % (2 * np.pi)))
    da = describe(img, None, kps, w).descriptors
    db = describe(rot, None, kps_rot, w).descriptors
    cos = (da * db).sum(1) / (np.linalg.norm(da, axis=1) * np.linalg.norm(db, axis=1))
    ok = shift_err < 1e-4 and cos.min() > 0.95
    report(acceptance_log, 4, ok, f"orientation-shift L2 {shift_err:.2e}; rotated-image cosine min {cos.min():.4f}"
           f" mean {cos.mean():.4f} over {len(kps)} keypoints")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_isometry_and_determinism(acceptance_log):
    devs = []
    for seed in range(3):
        g = init_cloth(25, 25, 1.0 / 24)
        out = simulate(g, 100, wind=WindField(25, 25, 0.15, seed=seed, dt=1 / 240), solver_iterations=30)
        devs.append(neighbor_deviation(out))
    cfg = SimConfig(width=160, height=120, texture_size=256, max_keypoints=200, warmup_steps=40, steps_between=30)
    a, b = generate_pair(cfg, seed=21), generate_pair(cfg, seed=21)
    same = a.image_a.tobytes() == b.image_a.tobytes() and a.image_b.tobytes() == b.image_b.tobytes()
    ok = max(devs) < 0.01 and same
    report(acceptance_log, 5, ok, f"max neighbour deviation {max(devs):.4%}; identical renders {same}")
    assert ok


# ---------------------------------------------------------------- 6


def _kps(n):
    return [Keypoint(float(i), 0.0, 1.0) for i in range(n)]


def _oracle(matches, na, nb, gt, thr):
    correct = sum(1 for m, g in itertools.product(matches, gt) if (m.index_a, m.index_b) == (g[0], g[1]) and g[2] <= thr)
    covis = sum(1 for m in matches if any(g[0] == m.index_a for g in gt))
    return correct, correct / min(na, nb), (correct / covis if covis else 0.0)


def test_criterion_6_metric_oracle(acceptance_log):
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(200):
        na, nb = (int(v) for v in rng.integers(1, 21, 2))
        n_gt = int(rng.integers(0, min(na, nb) + 1))
        gt = [(int(a), int(b), float(rng.uniform(0, 4)))
              for a, b in zip(rng.choice(na, n_gt, replace=False), rng.choice(nb, n_gt, replace=False))]
        matches = [Match(i, int(rng.integers(nb)), 0.0) for i in range(na) if rng.random() < 0.8]
        for a, b, _ in gt:
            if rng.random() < 0.5:
                matches = [m for m in matches if m.index_a != a] + [Match(a, b, 0.0)]
        r = evaluate_pair(matches, _kps(na), _kps(nb), gt, 3.0)
        bad += (r.n_correct, r.ms, r.mma) != _oracle(matches, na, nb, gt, 3.0)
    # MS = correct at 3 px / min(#kp_a, #kp_b): 3 correct of 8 vs 6 keypoints
    gt = [(0, 0, 1.0), (1, 1, 2.9), (2, 2, 3.0), (3, 3, 3.1)]
    spot = evaluate_pair([Match(i, i, 0.0) for i in range(4)], _kps(8), _kps(6), gt, 3.0)
    ok = bad == 0 and spot.ms == 3 / 6 and spot.mma == 3 / 4
    report(acceptance_log, 6, ok, f"{200 - bad}/200 instances equal the oracle; spot MS {spot.ms:.3f}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_tracking(acceptance_log, scene):
    rng = np.random.default_rng(7)
    pts = np.array([[k.x, k.y] for k in scene.keypoints_a])
    pred = transfer_points(scene.render_a, scene.grid_a, scene.grid_b, scene.render_b.camera, pts, scene.render_b)
    ok_rows = ~np.isnan(pred).any(1)
    src, dst = pts[ok_rows], pred[ok_rows]
    n = len(src)
    # equally many gross outliers: true transfer pushed 20-100 px in a random direction
    pick = rng.integers(0, n, n)
    ang = rng.uniform(0, 2 * np.pi, n)
    off = rng.uniform(20, 100, n)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    out_src = src[pick] + rng.normal(0, 0.5, (n, 2))
    out_dst = dst[pick] + off
    matches = np.concatenate([np.stack([src, dst], 1), np.stack([out_src, out_dst], 1)])
    warp, mask = ransac_tps_track(matches, iterations=1500)
    n_bad = int(mask[n:].sum())

    # held-out: random cloth pixels inside the hull of the recovered inliers
    hull = Delaunay(matches[mask, 0])
    cand = rng.uniform([0, 0], [319, 239], (4000, 2))
    cand = cand[hull.find_simplex(cand) >= 0]
    truth = transfer_points(scene.render_a, scene.grid_a, scene.grid_b, scene.render_b.camera, cand, scene.render_b)
    keep = ~np.isnan(truth).any(1)
    err = np.linalg.norm(warp.apply(cand[keep]) - truth[keep], axis=1)
    ok = n_bad == 0 and err.mean() < 1.0 and keep.sum() >= 50
    report(acceptance_log, 7, ok, f"{int(mask[:n].sum())}/{n} inliers kept, {n_bad} outliers accepted; held-out "
           f"mean error {err.mean():.3f}px on {int(keep.sum())} points")
    assert ok


# ---------------------------------------------------------------- 8

C8_SIM = SimConfig(width=192, height=144, texture_size=256, max_keypoints=256, warmup_steps=60, steps_between=45)


@pytest.mark.slow
def test_criterion_8_learning_effect(acceptance_log):
    # desk scale: small renders, 32 correspondences per pair, lr 1e-3
    t0 = time.perf_counter()
    pairs = []
    for s in range(220):
        p = generate_pair(C8_SIM, seed=1000 + s)
        p.render_a = p.render_b = p.grid_a = p.grid_b = None
        pairs.append(p)
    train_p, test_p = pairs[:200], pairs[200:]
    random_mma = describe_and_evaluate(test_p, init_weights(ArchConfig(), 0)).mean_mma
    mma = {}
    for warp in ("learned", "fixed"):
        cfg = TrainConfig(lr=1e-3, epochs=2, max_corrs_per_pair=32, arch=ArchConfig(warp=warp))
        mma[warp] = describe_and_evaluate(test_p, train(train_p, cfg).weights).mean_mma
    dt = time.perf_counter() - t0
    gain = mma["learned"] - random_mma
    ok = gain >= 0.15 and mma["learned"] >= mma["fixed"] and dt < 1800
    report(acceptance_log, 8, ok, f"MMA random {random_mma:.3f}, learned {mma['learned']:.3f} (+{100 * gain:.1f} pp), "
           f"fixed {mma['fixed']:.3f}; {dt / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_describe_budget(acceptance_log):
    from deal.simulator import procedural_texture

    img = procedural_texture(9, 640)[:480]
    rng = np.random.default_rng(9)
    kps = [Keypoint(*rng.uniform([40, 40], [600, 440]), rng.uniform(1.5, 5.0), rng.uniform(0, 2 * np.pi))
           for _ in range(250)]
    w = init_weights(ArchConfig(), seed=9)
    t0 = time.perf_counter()
    out = describe(img, None, kps, w)
    dt = time.perf_counter() - t0
    ok = dt < 5.0 and out.descriptors.shape == (250, 128) and not out.errors
    report(acceptance_log, 9, ok, f"250 keypoints on 640x480 in {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_io_round_trips(acceptance_log, tmp_path):
    rng = np.random.default_rng(10)
    same = {}

    def twice(name, write, read, obj):
        a, b = tmp_path / f"{name}.1", tmp_path / f"{name}.2"
        write(a, obj)
        write(b, read(a))
        same[name] = a.read_bytes() == b.read_bytes()

    desc = rng.standard_normal((17, 128)).astype(np.float32)
    desc[3] = np.nan
    twice("descriptors", dio.write_descriptors, dio.read_descriptors, desc)
    kps = [Keypoint(*rng.uniform(0, 600, 2), rng.uniform(1, 9), rng.uniform(0, 6.28)) for _ in range(30)]
    twice("keypoints", dio.write_keypoints, dio.read_keypoints, kps)
    w = init_weights(ArchConfig(encoder_channels=(4, 4, 8), head_channels=(4, 4, 8), regressor_hidden=(8,),
                                angular_bins=8, radial_bins=8), seed=10)
    twice("checkpoint", dio.write_checkpoint, dio.read_checkpoint, w)
    manifest = {"pairs": [{"image_a": "a.png", "image_b": "b.png", "keypoints_a": "a.kp", "keypoints_b": "b.kp",
                           "correspondences": "c.jsonl", "seed": 1, "sim_config": SimConfig().to_dict()}],
                "threshold_px": 3.0}
    twice("manifest", dio.write_manifest, dio.read_manifest, manifest)

    raw = bytearray((tmp_path / "checkpoint.1").read_bytes())
    raw[len(raw) // 2] ^= 0x10
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    try:
        dio.read_checkpoint(tmp_path / "bad.ckpt")
        crc = False
    except dio.InputError as exc:
        crc = "CRC" in str(exc)
    ok = all(same.values()) and crc
    report(acceptance_log, 10, ok, f"byte-identical {same}; corrupted checkpoint rejected by CRC {crc}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
