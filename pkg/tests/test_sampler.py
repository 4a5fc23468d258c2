import numpy as np
import pytest

from deal import diffcore as dc
from deal.errors import InputError
from deal.geometry import Keypoint
from deal.sampler import bilinear_sample, keypoint_window_grid, sample_patch_for_keypoint, sample_patches

SRC = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]


def test_integer_and_half_pixel_examples():
    assert bilinear_sample(SRC, np.array([[1.0, 0.0]])).value[0, 0] == 2.0
    assert bilinear_sample(SRC, np.array([[0.5, 0.5]])).value[0, 0] == 2.5


def test_integer_grid_reproduces_source():
    rng = np.random.default_rng(0)
    src = rng.standard_normal((6, 7, 3))
    ys, xs = np.mgrid[0:6, 0:7]
    grid = np.stack([xs, ys], -1).astype(float)
    np.testing.assert_array_equal(bilinear_sample(src, grid).value, src)


def test_linearity_in_source():
    rng = np.random.default_rng(1)
    s1, s2 = rng.standard_normal((2, 8, 8, 2))
    grid = rng.uniform(-1, 8, (5, 4, 2))
    lhs = bilinear_sample(2 * s1 - 0.5 * s2, grid).value
    rhs = 2 * bilinear_sample(s1, grid).value - 0.5 * bilinear_sample(s2, grid).value
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_gradients_source_and_grid():
    rng = np.random.default_rng(2)
    src = rng.standard_normal((8, 8, 3))
    grid = rng.uniform(0.5, 6.5, (4, 5, 2))
    frac = grid - np.floor(grid)
    grid = np.where(np.abs(frac - 0.5) > 0.499, grid + 0.01, grid)
    rep = dc.gradient_check(lambda s, g: bilinear_sample(s, g), [src, grid], h=1e-4)
    assert rep.max_rel_error < 1e-5, rep


@pytest.mark.parametrize("padding", ["zeros", "clamp"])
def test_gradients_near_border(padding):
    rng = np.random.default_rng(3)
    src = rng.standard_normal((5, 6, 2))
    grid = rng.uniform(-1.5, 6.5, (10, 2)) + 0.013
    rep = dc.gradient_check(lambda s, g: bilinear_sample(s, g, padding), [src, grid], h=1e-6)
    assert rep.max_rel_error < 1e-5, rep


def test_outside_grid_is_zero_with_zero_source_gradient():
    rng = np.random.default_rng(4)
    src = dc.Tensor(rng.standard_normal((4, 4, 2)), requires_grad=True)
    grid = np.full((3, 3, 2), 50.0)
    with dc.Tape() as tape:
        out = bilinear_sample(src, grid)
        loss = dc.tsum(out)
    assert not out.value.any()
    dc.backward(tape, loss)
    assert not src.grad.any()


def test_clamp_reads_border():
    out = bilinear_sample(SRC, np.array([[-5.0, -5.0], [9.0, 9.0]]), padding="clamp").value
    np.testing.assert_array_equal(out[:, 0], [1.0, 4.0])


def test_errors():
    with pytest.raises(InputError):
        bilinear_sample(SRC, np.array([[np.nan, 0.0]]))
    with pytest.raises(InputError):
        bilinear_sample(SRC[..., 0], np.array([[0.0, 0.0]]))
    with pytest.raises(InputError):
        bilinear_sample(np.zeros((1, 4, 1)), np.array([[0.0, 0.0]]))
    with pytest.raises(InputError):
        bilinear_sample(SRC, np.array([[0.0, 0.0]]), padding="reflect")


def test_window_centering():
    g = keypoint_window_grid(Keypoint(80, 80, 4), 8, 5)
    np.testing.assert_array_equal(g[2, 2], [10, 10])
    a = keypoint_window_grid(Keypoint(40, 24, 4), 8, 5)
    b = keypoint_window_grid(Keypoint(48, 24, 4), 8, 5)
    np.testing.assert_array_equal(b - a, np.tile([1.0, 0.0], (5, 5, 1)))


def test_window_shifted_keypoints_shift_by_one_cell():
    rng = np.random.default_rng(5)
    fmap = rng.standard_normal((12, 12, 4))
    a = sample_patch_for_keypoint(fmap, Keypoint(40, 48, 3), 8, 5).value
    b = sample_patch_for_keypoint(fmap, Keypoint(48, 48, 3), 8, 5).value
    np.testing.assert_array_equal(a[:, 1:], b[:, :-1])


def test_constant_feature_map():
    fmap = np.full((10, 10, 3), 0.7)
    w = sample_patch_for_keypoint(fmap, Keypoint(36, 36, 2), 8, 5).value
    np.testing.assert_allclose(w, 0.7)


def test_keypoint_outside_image():
    fmap = np.zeros((4, 4, 2))
    with pytest.raises(InputError):
        sample_patches(fmap, [Keypoint(100, 5, 2)], 8, 5)
