from dataclasses import replace

import numpy as np
import pytest

from deal import diffcore as dc
from deal.errors import InputError
from deal.geometry import Keypoint, TpsParams, control_points_lattice, polar_unit_grid, tps_apply
from deal.network import (
    ArchConfig,
    ModelWeights,
    describe,
    describe_patch,
    describe_patches,
    describe_tensor,
    encode_features,
    fixed_polar_variant,
    init_weights,
    plain_polar_patch,
    rectify_patch,
    regress_tps,
)
from deal.loss import hardest_triplet_loss

TINY = ArchConfig(
    encoder_channels=(2, 3, 4),
    regressor_hidden=(6,),
    dropout=0.0,
    control_side=2,
    angular_bins=8,
    radial_bins=8,
    head_channels=(2, 3, 4),
    support_factor=2.0,
    min_image_side=16,
)


@pytest.fixture(scope="module")
def weights():
    return init_weights(ArchConfig(), seed=3)


def smooth_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(6):
        fx, fy = rng.uniform(0.02, 0.12, 2)
        ph = rng.uniform(0, 2 * np.pi)
        img += np.sin(fx * xs + fy * ys + ph)
    return (img - img.min()) / (img.max() - img.min())


def test_encoder_shapes(weights):
    assert encode_features(np.zeros((64, 64, 3)), weights).value.shape == (8, 8, 128)
    assert encode_features(np.zeros((96, 80, 3)), weights).value.shape == (12, 10, 128)
    with pytest.raises(InputError):
        encode_features(np.zeros((16, 64, 3)), weights)


def test_encoder_translation_by_stride():
    # a shift by the stride moves the interior of the map by exactly one cell
    w = init_weights(ArchConfig(), seed=1)
    img = smooth_image(96, 168, seed=2)
    a = encode_features(img[:, :160], w).value
    b = encode_features(img[:, 8:], w).value
    # columns far from the left/right borders
    np.testing.assert_allclose(a[:, 6:14], b[:, 5:13], atol=1e-5)


def test_zero_regressor_gives_identity(weights):
    feats = np.random.default_rng(0).standard_normal(5 * 5 * 128)
    p = regress_tps(feats, weights)
    assert p.is_identity()
    w = weights.copy()
    bias = np.zeros(w.config.theta_dim, np.float32)
    bias[2] = 0.25
    w.params["regressor.fc2.bias"].value[:] = bias
    p = regress_tps(feats, w)
    np.testing.assert_allclose(p.affine, [[1, 0, 0.25], [0, 1, 0]], atol=1e-7)
    with pytest.raises(InputError):
        regress_tps(np.zeros(7), weights)


def test_rectify_identity_equals_plain_polar():
    img = smooth_image(60, 70)
    for kp in (Keypoint(30, 25, 4.0, 0.3), Keypoint(10.5, 50.2, 7.0, 2.0)):
        a = rectify_patch(img, kp, TpsParams.identity())
        b = plain_polar_patch(img, kp)
        assert np.array_equal(a, b)
    const = np.full((40, 40), 0.6)
    np.testing.assert_allclose(rectify_patch(const, Keypoint(20, 20, 3.0), TpsParams.identity()), 0.6)


def test_rectify_matches_warped_oracle():
    # analytic image, analytic warp: the sampled patch must equal f(warped points)
    def f(x, y):
        return 0.5 + 0.25 * np.sin(0.11 * x + 0.05 * y) + 0.2 * np.cos(0.07 * y - 0.03 * x)

    h, w = 80, 90
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = f(xs, ys)
    rng = np.random.default_rng(7)
    cp = control_points_lattice(8)
    theta = np.concatenate([[0.05, -0.03, 0.04, 0.02, 0.06, -0.05], 0.01 * rng.standard_normal(128)])
    params = TpsParams.from_offsets(theta, cp)
    kp = Keypoint(45, 40, 3.0, 0.4)
    cfg = ArchConfig(support_factor=6.0)
    got = rectify_patch(img, kp, params, cfg)[..., 0]
    unit = tps_apply(params, polar_unit_grid(kp.orientation, 32, 32))
    pts = np.array([kp.x, kp.y]) + kp.size * 6.0 * unit
    want = f(pts[..., 0], pts[..., 1])
    assert np.mean(np.abs(got - want)) / np.mean(np.abs(want)) < 0.02


def test_describe_patch_properties(weights):
    rng = np.random.default_rng(11)
    patch = rng.uniform(0, 1, (32, 32, 1))
    d = describe_patch(patch, weights)
    assert d.shape == (128,)
    assert abs(np.linalg.norm(d.astype(np.float64)) - 1) < 1e-6
    for k in (4, 8, 28):
        dk = describe_patch(np.roll(patch, k, axis=0), weights)
        assert np.linalg.norm(dk - d) < 1e-5
    other = describe_patch(rng.uniform(0, 1, (32, 32, 1)), weights)
    assert np.linalg.norm(other - d) > 1e-3
    with pytest.raises(InputError):
        describe_patch(np.zeros((16, 32, 1)), weights)


def test_describe_empty_and_duplicates(weights):
    img = smooth_image(96, 96, seed=4)
    out = describe(img, None, [], weights)
    assert out.descriptors.shape == (0, 128)
    kp = Keypoint(40, 50, 3.0, 1.0)
    out = describe(img, None, [kp, kp, Keypoint(60, 30, 2.5, 0.0)], weights)
    assert np.array_equal(out.descriptors[0], out.descriptors[1])
    assert out.valid.all()


def test_describe_reports_bad_keypoints(weights):
    img = smooth_image(64, 64)
    out = describe(img, None, [Keypoint(30, 30, 3.0), Keypoint(500, 30, 3.0), Keypoint(20, 20, 0.0)], weights)
    assert set(out.errors) == {1, 2}
    assert np.isnan(out.descriptors[1]).all() and np.isfinite(out.descriptors[0]).all()
    with pytest.raises(InputError):
        describe_tensor(img, None, [Keypoint(500, 30, 3.0)], weights)


def test_describe_at_init_equals_fixed_polar(weights):
    img = smooth_image(96, 128, seed=5)
    rng = np.random.default_rng(5)
    kps = [Keypoint(*rng.uniform([8, 8], [120, 88]), rng.uniform(1.5, 4), rng.uniform(0, 6.28)) for _ in range(12)]
    a = describe(img, None, kps, weights).descriptors
    b = describe(img, None, kps, fixed_polar_variant(weights)).descriptors
    assert np.array_equal(a, b)


def test_checkpoint_names_round_trip(weights):
    arrays = weights.named_arrays()
    back = ModelWeights.from_named_arrays(weights.config, arrays)
    for k, v in back.named_arrays().items():
        assert np.array_equal(v, arrays[k])
    arrays.pop("head.collapse.weight")
    with pytest.raises(InputError):
        ModelWeights.from_named_arrays(weights.config, arrays)


def _tiny_weights(seed=0):
    w = init_weights(TINY, seed)
    rng = np.random.default_rng(seed + 100)
    for k, t in w.params.items():
        t.value = t.value.astype(np.float64)
        if k.startswith("regressor.fc1"):
            t.value = 0.05 * rng.standard_normal(t.value.shape)
    return w


def end_to_end_loss(w, names, img_a, img_b, kps):
    def f(*tensors):
        params = dict(w.params)
        params.update(zip(names, tensors))
        mw = ModelWeights(w.config, params, {k: dc.NormState(v.mean.copy(), v.var.copy()) for k, v in w.norms.items()})
        da = describe_tensor(img_a, None, kps, mw, mode="train")
        db = describe_tensor(img_b, None, kps, mw, mode="train")
        return hardest_triplet_loss(da, db, margin=2.0)

    return f


def test_end_to_end_gradient_tiny():
    w = _tiny_weights()
    img = smooth_image(32, 32, seed=9)
    img_b = np.roll(img, 1, axis=1)
    kps = [Keypoint(12.3, 14.1, 2.2, 0.4), Keypoint(20.2, 18.7, 1.9, 2.1), Keypoint(16.6, 9.4, 2.5, 4.0)]
    names = ["regressor.fc1.weight", "encoder.stage2.down.kernel", "head.conv4.kernel", "head.collapse.weight"]
    rep = dc.gradient_check(end_to_end_loss(w, names, img, img_b, kps), [w.params[n].value for n in names], h=1e-6)
    assert rep.max_rel_error < 1e-4, rep


def test_tiny_config_validation():
    with pytest.raises(InputError):
        replace(TINY, angular_bins=6)
    with pytest.raises(InputError):
        ArchConfig(warp="sideways")


def test_describe_patches_is_batch_consistent_in_eval(weights):
    rng = np.random.default_rng(2)
    patches = rng.uniform(0, 1, (3, 32, 32, 1)).astype(np.float32)
    batch = describe_patches(patches, weights).value
    one = describe_patches(patches[1:2], weights).value
    np.testing.assert_allclose(batch[1], one[0], atol=1e-6)
