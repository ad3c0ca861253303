import numpy as np
import pytest
from builders import disc, generic_position, random_tuple
from oracles import naive_bilinear, naive_ssim_cs, random_rotation, scalar_warp, smooth_image

from nrdepth.camera import Intrinsics
from nrdepth.masks import FrameTuple
from nrdepth.photometric import (LossBreakdown, LossWeights, combine, composed_depth, footprint_inside, inverse_warp,
                                 photo_loss,
                                 photo_loss_one_ref, regularizer_loss, sample_bilinear, smooth_loss, ssim_cs,
                                 total_loss, total_loss_gradient, warp_pixels)
from nrdepth.raster import DepthMap, MotionMap

K32 = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)


def flat_depth(z=2.0, shape=(32, 32), valid=None):
    valid = np.ones(shape, bool) if valid is None else valid
    return DepthMap(np.where(valid, z, np.nan), valid)


# --------------------------------------------------------------------------- warping

def test_identity_warp_returns_pixel_centers():
    rng = np.random.default_rng(0)
    depth = DepthMap(rng.uniform(0.5, 5, (32, 32)), np.ones((32, 32), bool))
    w = warp_pixels(K32, MotionMap.identity(np.ones((32, 32), bool)), depth)
    ys, xs = np.mgrid[:32, :32]
    assert np.max(np.abs(w.coords[..., 0] - (xs + 0.5))) < 1e-9
    assert np.max(np.abs(w.coords[..., 1] - (ys + 0.5))) < 1e-9


@pytest.mark.parametrize("z", [1.0, 2.0, 4.0])
def test_translation_shifts_by_f_t_over_z(z):
    mm = MotionMap.uniform(np.ones((32, 32), bool), np.eye(3), [0.1, 0.0, 0.0])
    w = warp_pixels(K32, mm, flat_depth(z))
    ys, xs = np.mgrid[:32, :32]
    assert np.allclose(w.coords[..., 0] - (xs + 0.5), 40.0 * 0.1 / z, atol=1e-12, rtol=0)
    assert np.allclose(w.coords[..., 1], ys + 0.5, atol=1e-12, rtol=0)


def test_random_warp_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    h, w = 6, 7
    K = Intrinsics(50.0, 45.0, 3.3, 2.9, w, h)
    rot = np.stack([random_rotation(rng, 0.2) for _ in range(h * w)]).reshape(h, w, 3, 3)
    trans = rng.normal(0, 0.1, (h, w, 3))
    depth = rng.uniform(1, 3, (h, w))
    warp = warp_pixels(K, MotionMap(rot, trans, np.ones((h, w), bool)), DepthMap(depth, np.ones((h, w), bool)))
    for r in range(h):
        for c in range(w):
            u, v = scalar_warp(50.0, 45.0, 3.3, 2.9, rot[r, c].tolist(), trans[r, c].tolist(), c, r, depth[r, c])
            assert abs(warp.coords[r, c, 0] - u) < 1e-9
            assert abs(warp.coords[r, c, 1] - v) < 1e-9


def test_behind_camera_warp_is_invalid_not_an_error():
    mm = MotionMap.uniform(np.ones((32, 32), bool), np.eye(3), [0.0, 0.0, -3.0])
    w = warp_pixels(K32, mm, flat_depth(2.0))
    assert not w.valid.any()


def test_warp_jacobian_matches_finite_difference():
    rng = np.random.default_rng(2)
    rot = np.stack([random_rotation(rng, 0.2) for _ in range(32 * 32)]).reshape(32, 32, 3, 3)
    mm = MotionMap(rot, rng.normal(0, 0.1, (32, 32, 3)), np.ones((32, 32), bool))
    d = rng.uniform(1.5, 2.5, (32, 32))
    ok = np.ones((32, 32), bool)
    w = warp_pixels(K32, mm, DepthMap(d, ok), with_jacobian=True)
    h = 1e-6
    a = warp_pixels(K32, mm, DepthMap(d + h, ok)).coords
    b = warp_pixels(K32, mm, DepthMap(d - h, ok)).coords
    assert np.allclose(w.jacobian, (a - b) / (2 * h), atol=1e-6)


# --------------------------------------------------------------------------- bilinear sampling

def test_bilinear_integer_coords_are_exact():
    img = np.random.default_rng(3).random((9, 11, 3))
    ys, xs = np.mgrid[:8, :10]
    s = sample_bilinear(img, np.stack([xs, ys], -1).astype(float))
    assert s.valid.all()
    assert np.array_equal(s.values, img[:8, :10])


def test_bilinear_midpoint_on_ramp():
    ramp = np.tile(np.arange(10.0), (5, 1))
    s = sample_bilinear(ramp, np.array([[3.5, 2.0], [0.25, 1.0]]))
    assert np.allclose(s.values, [3.5, 0.25], atol=0, rtol=1e-15)


def test_bilinear_matches_naive_oracle():
    rng = np.random.default_rng(4)
    img = rng.random((12, 15))
    coords = np.column_stack([rng.uniform(-1, 15, 500), rng.uniform(-1, 12, 500)])
    s = sample_bilinear(img, coords)
    for (x, y), val, ok in zip(coords, s.values, s.valid):
        ref = naive_bilinear(img, x, y)
        assert ok == (ref is not None)
        if ok:
            assert abs(val - ref) <= 1e-12


def test_bilinear_gradient_is_the_coordinate_derivative():
    rng = np.random.default_rng(5)
    img = rng.random((10, 10, 3))
    c = rng.uniform(1, 8, (50, 2))
    s = sample_bilinear(img, c, with_gradient=True)
    h = 1e-7
    for axis, g in ((0, s.grad_x), (1, s.grad_y)):
        e = np.zeros(2)
        e[axis] = h
        fd = (sample_bilinear(img, c + e).values - sample_bilinear(img, c - e).values) / (2 * h)
        assert np.allclose(g, fd, atol=1e-6)


# --------------------------------------------------------------------------- SSIM_cs

def test_ssim_identical_is_one():
    x = np.random.default_rng(6).random((20, 20, 3))
    assert np.all(ssim_cs(x, x) == 1.0)
    assert np.all(ssim_cs(x, x, np.random.default_rng(1).random((20, 20)) < 0.5) == 1.0)


def test_ssim_of_constants_is_one():
    assert np.all(ssim_cs(np.full((10, 10), 0.2), np.full((10, 10), 0.7)) == 1.0)


def test_ssim_invariant_to_additive_constant():
    x = np.random.default_rng(7).random((16, 16))
    assert np.allclose(ssim_cs(x, x + 0.3), 1.0, atol=1e-12)


@pytest.mark.parametrize("window", [3, 7])
def test_ssim_matches_naive_oracle(window):
    rng = np.random.default_rng(8)
    x, y = rng.random((14, 13)), rng.random((14, 13))
    mask = rng.random((14, 13)) < 0.7
    got = ssim_cs(x, y, mask, window=window)
    want = naive_ssim_cs(x, y, mask, window, 0.03 ** 2)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_ssim_is_bounded():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s = ssim_cs(rng.random((12, 12)), rng.random((12, 12)), rng.random((12, 12)) < 0.6)
        assert np.all(s <= 1 + 1e-12) and np.all(s >= -1 - 1e-12)


# --------------------------------------------------------------------------- per-reference photo term

def test_photo_zero_for_identical_images():
    rng = np.random.default_rng(10)
    img = rng.random((16, 16, 3))
    for _ in range(5):
        assert photo_loss_one_ref(img, img, rng.random((16, 16)) < 0.5) == 0.0


def test_photo_zero_for_empty_mask():
    rng = np.random.default_rng(11)
    assert photo_loss_one_ref(rng.random((8, 8, 3)), rng.random((8, 8, 3)), np.zeros((8, 8), bool)) == 0.0


def test_photo_hand_computed_8x8():
    # a window wide enough to see the whole image makes every window's statistics global:
    # var_x = var_y = 1/4, cov = -1/4, so (1 - SSIM_cs)/2 = 1/(1 + 2c) and L1 = 1
    x = (np.indices((8, 8)).sum(0) % 2).astype(float)
    c = 0.03 ** 2
    got = photo_loss_one_ref(x, 1.0 - x, np.ones((8, 8), bool), window=15)
    assert np.isclose(got, 0.9 / (1 + 2 * c) + 0.1, rtol=1e-14, atol=0)


def test_photo_constant_shift_is_pure_l1():
    x = np.random.default_rng(12).random((8, 8, 3)) * 0.5
    got = photo_loss_one_ref(x, x + 0.25, np.ones((8, 8), bool))
    assert np.isclose(got, 0.1 * 0.25, rtol=1e-12, atol=1e-15)


# --------------------------------------------------------------------------- tuple losses

def test_photo_loss_is_additive_over_references():
    rng = np.random.default_rng(13)
    tup, offset = random_tuple(rng, n_refs=3)
    total = photo_loss(tup, offset)
    parts = []
    for i in range(3):
        single = FrameTuple(0, [1], tup.K, tup.image, [tup.ref_images[i]], [tup.motions[i]], [tup.masks[i]], tup.base,
                            [tup.ref_silhouettes[i]])
        parts.append(photo_loss(single, offset))
    assert total == pytest.approx(sum(parts), rel=1e-13)
    assert total_loss(tup, offset).per_reference == pytest.approx(parts, rel=1e-13)


def test_single_reference_equals_per_reference_term():
    rng = np.random.default_rng(14)
    tup, offset = random_tuple(rng, n_refs=1)
    warped, ok = inverse_warp(tup, offset, 0)
    want = photo_loss_one_ref(tup.image, warped, tup.masks[0] & ok)
    assert photo_loss(tup, offset) == pytest.approx(want, rel=1e-13)


def test_zero_weights_reduce_to_photo():
    rng = np.random.default_rng(15)
    tup, offset = random_tuple(rng)
    br = total_loss(tup, offset, LossWeights(gamma_smooth=0, gamma_reg=0))
    assert br.total == br.photo


def test_breakdown_recombines_exactly():
    rng = np.random.default_rng(16)
    tup, offset = random_tuple(rng)
    w = LossWeights()
    br = total_loss(tup, offset, w)
    assert br.total == br.photo + w.gamma_smooth * br.smooth + w.gamma_reg * br.regularizer
    assert br.total == combine(br.photo, br.smooth, br.regularizer, w)
    assert min(br.photo, br.smooth, br.regularizer) >= 0


def test_breakdown_log_line_round_trips_floats():
    br = LossBreakdown(0.1, 2.0 / 3.0, 1e-7, 0.30000000000000004)
    fields = br.log_line(7).split(", ")
    assert fields[0] == "7"
    assert [float(f) for f in fields[1:]] == [0.1, 2.0 / 3.0, 1e-7, 0.30000000000000004]


def test_smooth_loss_examples():
    valid = disc(16, 6)
    base = DepthMap(np.where(valid, 2.0 + np.random.default_rng(17).random((16, 16)), np.nan), valid)
    assert smooth_loss(base, base) == 0.0
    assert smooth_loss(composed_depth(base, np.full((16, 16), 0.03)), base) == pytest.approx(0.0, abs=1e-12)


def test_smooth_loss_linear_ramp():
    g = 0.002
    valid = np.ones((6, 9), bool)
    base = flat_depth(2.0, (6, 9))
    ramp = g * np.arange(9)[None, :] * np.ones((6, 1))
    # x pairs: 6 rows * 8 pairs each carry |g|; y pairs carry 0
    assert smooth_loss(composed_depth(base, ramp), base) == pytest.approx(6 * 8 * g, rel=1e-12)
    both = ramp + g * np.arange(6)[:, None]
    assert smooth_loss(composed_depth(base, both), base) == pytest.approx((6 * 8 + 5 * 9) * g, rel=1e-12)
    assert valid.all()


def test_regularizer_examples():
    rng = np.random.default_rng(18)
    valid = disc(16, 6)
    base = DepthMap(np.where(valid, 2.0, np.nan), valid)
    assert regularizer_loss(base, base) == 0.0
    assert regularizer_loss(composed_depth(base, np.full((16, 16), -0.01)), base) == pytest.approx(
        valid.sum() * 0.01, rel=1e-12)
    off = rng.normal(0, 0.02, (16, 16))
    naive = sum(abs(off[r, c]) for r in range(16) for c in range(16) if valid[r, c])
    assert regularizer_loss(composed_depth(base, off), base) == pytest.approx(naive, rel=1e-12)


def test_total_loss_matches_manual_assembly():
    rng = np.random.default_rng(19)
    tup, offset = random_tuple(rng)
    w = LossWeights()
    photo = 0.0
    for i in range(len(tup.references)):
        warped, ok = inverse_warp(tup, offset, i)
        photo += photo_loss_one_ref(tup.image, warped, tup.masks[i] & ok)
    comp = composed_depth(tup.base, offset)
    br = total_loss(tup, offset, w)
    assert br.photo == pytest.approx(photo, rel=1e-12)
    assert br.smooth == pytest.approx(smooth_loss(comp, tup.base), rel=1e-12)
    assert br.regularizer == pytest.approx(regularizer_loss(comp, tup.base), rel=1e-12)


# --------------------------------------------------------------------------- gradient

def test_gradient_zero_without_masks_or_weights():
    rng = np.random.default_rng(20)
    tup, offset = random_tuple(rng)
    for m in tup.masks:
        m[:] = False
    g = total_loss_gradient(tup, offset, LossWeights(gamma_smooth=0, gamma_reg=0))
    assert np.all(g == 0)


def test_gradient_regularizer_only_is_sign():
    rng = np.random.default_rng(21)
    tup, offset = random_tuple(rng)
    for m in tup.masks:
        m[:] = False
    g = total_loss_gradient(tup, offset, LossWeights(gamma_smooth=0, gamma_reg=1e-6))
    assert np.array_equal(g, 1e-6 * np.sign(offset) * tup.silhouette)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(100 + seed)
    tup, offset = random_tuple(rng)
    offset = generic_position(rng, tup, offset)
    g = total_loss_gradient(tup, offset)
    h = 1e-4
    worst = 0.0
    for r, c in zip(*np.nonzero(np.abs(g) > 1e-8)):
        e = np.zeros_like(offset)
        e[r, c] = h
        fd = (total_loss(tup, offset + e).total - total_loss(tup, offset - e).total) / (2 * h)
        worst = max(worst, abs(fd - g[r, c]) / abs(g[r, c]))
    assert worst < 1e-4


def test_footprint_inside_silhouette():
    sil = np.zeros((6, 6), bool)
    sil[1:5, 1:5] = True
    coords = np.array([[1.0, 1.0], [2.5, 2.5], [3.0, 3.0], [3.5, 1.2], [0.9, 2.0], [4.0, 2.0], [np.nan, 2.0]])
    assert footprint_inside(sil, coords).tolist() == [True, True, True, True, False, False, False]


def test_samples_touching_reference_background_are_ignored():
    rng = np.random.default_rng(24)
    tup, offset = random_tuple(rng, n_refs=2)
    before = total_loss(tup, offset).per_reference
    # painting the reference background changes nothing while footprints stay on the silhouette
    for img, sil in zip(tup.ref_images, tup.ref_silhouettes):
        img[~sil] = rng.random(((~sil).sum(), 3))
    assert total_loss(tup, offset).per_reference == before
    tup.ref_silhouettes = None
    assert total_loss(tup, offset).per_reference != before


def test_masked_pixels_do_not_influence_the_loss():
    rng = np.random.default_rng(22)
    tup, offset = random_tuple(rng, keep=0.6)
    off_sil = ~tup.silhouette
    bumped = offset.copy()
    bumped[off_sil] += rng.normal(0, 1.0, int(off_sil.sum()))
    assert total_loss(tup, bumped).total == total_loss(tup, offset).total
    # inside the silhouette but outside every mask only the smooth and regularizer terms may move
    dead = tup.silhouette & ~np.logical_or.reduce(tup.masks)
    assert dead.any()
    bumped = offset.copy()
    bumped[dead] += 0.01
    assert photo_loss(tup, bumped) == photo_loss(tup, offset)
    g = total_loss_gradient(tup, offset, LossWeights(gamma_smooth=0, gamma_reg=0))
    assert np.all(g[dead] == 0)


def test_textured_shift_recovers_zero_loss_at_truth():
    # a fronto-parallel plane seen after a pure translation: the true depth reproduces the target
    rng = np.random.default_rng(23)
    K = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
    ref = smooth_image(rng, (64, 64, 3))
    valid = np.ones((32, 32), bool)
    z = 2.0
    mm = MotionMap.uniform(valid, np.eye(3), [0.1, 0.0, 0.0])
    ys, xs = np.mgrid[:32, :32]
    coords = np.stack([xs + 0.5 + 40 * 0.1 / z - 0.5, ys.astype(float)], -1)
    target = sample_bilinear(ref[:32, :40], coords).values
    tup = FrameTuple(0, [1], K, target, [ref[:32, :40][:, :32]], [mm], [valid], DepthMap(np.full((32, 32), z), valid))
    # only pixels that stay inside the 32-wide reference contribute
    assert photo_loss(tup, np.zeros((32, 32))) < 1e-12
