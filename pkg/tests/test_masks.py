import logging

import numpy as np
import pytest
from oracles import pixel_rays, ray_cast
from scipy.ndimage import maximum_filter, minimum_filter

from nrdepth import synth
from nrdepth.camera import Intrinsics
from nrdepth.errors import InputError
from nrdepth.masks import (REFERENCE_OFFSETS, FrameTuple, MotionCache, build_frame_tuple, filter_tuples,
                           format_tuple_list, group_tuples, parse_tuple_list, pixel_baseline, tuple_mean_baseline,
                           validation_mask)
from nrdepth.mesh import TriMesh, all_vertex_transforms, build_two_ring
from nrdepth.raster import DepthMap, MotionMap, rasterize, render_depth, render_motion_map

K64 = Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)


def ball(z=2.0, radius=0.2):
    v, f, _ = synth.capsule_mesh(radius, 1e-4, 48, 2, 16)
    return TriMesh(v + [0, 0, z], f)


def uniform_tuple(translations, shape=(8, 8)):
    valid = np.ones(shape, bool)
    K = Intrinsics(10.0, 10.0, shape[1] / 2, shape[0] / 2, shape[1], shape[0])
    motions = [MotionMap.uniform(valid, np.eye(3), t) for t in translations]
    img = np.zeros(shape + (3,))
    n = len(translations)
    return FrameTuple(0, list(range(1, n + 1)), K, img, [img] * n, motions, [valid] * n,
                      DepthMap(np.full(shape, 2.0), valid))


# --------------------------------------------------------------------------- baselines

def test_pixel_baseline_examples():
    valid = np.ones((4, 5), bool)
    valid[0, 0] = False
    assert np.all(pixel_baseline(MotionMap.identity(valid)) == 0)
    b = pixel_baseline(MotionMap.uniform(valid, np.eye(3), [0.3, 0.0, 0.4]))
    assert np.all(b[valid] == 0.5)
    assert b[0, 0] == 0


def test_pixel_baseline_matches_vertex_norms():
    scene = synth.generate_scene(seed=2, frames=8, motion_kind="articulated",
                                 K=synth.default_intrinsics(64), density=0.4)
    tm, rm = scene.base_mesh(0), scene.base_mesh(7)
    mm = render_motion_map(tm, rm, scene.K)
    tr = all_vertex_transforms(tm, rm, build_two_ring(tm.faces, tm.vertex_count))
    frags = rasterize(tm.vertices, tm.faces, scene.K)
    corners = tm.faces[frags.face[mm.valid]]
    expected = np.linalg.norm(tr.translations[corners].mean(axis=1), axis=1)
    assert np.allclose(pixel_baseline(mm)[mm.valid], expected, atol=1e-12)


# --------------------------------------------------------------------------- validation masks

def test_identity_motion_gives_empty_mask():
    m = ball()
    mot = MotionMap.identity(render_depth(m, K64).valid)
    assert not validation_mask(mot, m, m, K64).any()


def test_lateral_translation_of_convex_blob_gives_silhouette():
    m = ball()
    sil = render_depth(m, K64).valid
    mot = MotionMap.uniform(sil, np.eye(3), [0.1, 0.0, 0.0])
    mask = validation_mask(mot, m, m.transformed(np.eye(3), [0.1, 0.0, 0.0]), K64)
    assert sil.sum() > 200
    assert np.array_equal(mask, sil)


def test_points_moved_behind_an_occluder_are_masked():
    m = ball()
    sil = render_depth(m, K64).valid
    blocker = TriMesh([[-1, -1, 1.0], [1, -1, 1.0], [0, 1, 1.0]], [[0, 1, 2]])
    ref = TriMesh(np.vstack([m.vertices + [0.1, 0, 0], blocker.vertices]),
                  np.vstack([m.faces, blocker.faces + m.vertex_count]))
    mot = MotionMap.uniform(sil, np.eye(3), [0.1, 0.0, 0.0])
    mask = validation_mask(mot, m, ref, K64)
    assert not mask.any()


def test_mask_is_inside_motion_valid_set():
    scene = synth.generate_scene(seed=1, frames=12, motion_kind="articulated",
                                 K=synth.default_intrinsics(64), density=0.4)
    cache = MotionCache(scene.sequence, scene.K)
    mm = cache.motion(0, 9)
    mask = validation_mask(mm, scene.base_mesh(0), scene.base_mesh(9), scene.K)
    assert mask.any()
    assert not np.any(mask & ~mm.valid)


def test_raising_the_threshold_never_adds_pixels():
    scene = synth.generate_scene(seed=1, frames=12, motion_kind="articulated",
                                 K=synth.default_intrinsics(64), density=0.4)
    cache = MotionCache(scene.sequence, scene.K)
    mm = cache.motion(2, 10)
    prev = None
    for thr in (0.0, 0.02, 0.05, 0.08, 0.12, 0.2, 1.0, 100.0):
        mask = validation_mask(mm, None, None, scene.K, thr, target_view=cache.view(2), reference_view=cache.view(10))
        if prev is not None:
            assert not np.any(mask & ~prev)
        prev = mask
    assert not prev.any()


def test_arm_over_torso_agrees_with_ray_casting():
    K = synth.default_intrinsics(96)
    scene = synth.generate_scene(seed=1, frames=20, motion_kind="articulated", K=K, density=0.5)
    seq = scene.sequence
    faces = seq.topology
    comp_face = scene.proxy.component[faces[:, 0]]
    cache = MotionCache(seq, K)

    def band(view):
        f = view.fragments.face
        lab = np.where(f >= 0, comp_face[np.maximum(f, 0)] + 1, 0)
        return maximum_filter(lab, 3) != minimum_filter(lab, 3)

    occluded = 0
    for t, r in ((3, 12), (6, 15)):
        mm = cache.motion(t, r)
        mask = validation_mask(mm, None, None, K, target_view=cache.view(t), reference_view=cache.view(r))
        rays = pixel_rays(K)
        th, _ = ray_cast(np.zeros(3), rays, seq.frames[t], faces)
        hit = np.isfinite(th).reshape(K.shape)
        X = (rays * np.where(np.isfinite(th), th, 0)[:, None]).reshape(K.shape + (3,))
        Xr = np.einsum("hwij,hwj->hwi", mm.rotation, X) + mm.translation
        sel = hit & mm.valid
        dirs = Xr[sel] / Xr[sel][:, 2:3]
        tr, _ = ray_cast(np.zeros(3), dirs, seq.frames[r], faces)
        u = K.focal_x * dirs[:, 0] + K.principal_x
        v = K.focal_y * dirs[:, 1] + K.principal_y
        inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        vis = inside & np.isfinite(tr) & (Xr[sel][:, 2] <= tr + 0.005)
        oracle = np.zeros(K.shape, bool)
        oracle[sel] = vis
        oracle &= np.linalg.norm(mm.translation, axis=-1) > 0.05
        occluded += int((sel & ~oracle & (np.linalg.norm(mm.translation, axis=-1) > 0.05)).sum())
        col = np.clip(np.floor(np.nan_to_num(K.focal_x * Xr[..., 0] / np.where(Xr[..., 2] > 0, Xr[..., 2], 1)
                                             + K.principal_x)), 0, K.width - 1).astype(int)
        row = np.clip(np.floor(np.nan_to_num(K.focal_y * Xr[..., 1] / np.where(Xr[..., 2] > 0, Xr[..., 2], 1)
                                             + K.principal_y)), 0, K.height - 1).astype(int)
        allowed = band(cache.view(t)) | band(cache.view(r))[row, col]
        d = oracle != mask
        assert d.mean() <= 1e-3
        assert not np.any(d & ~allowed)
    assert occluded > 0


# --------------------------------------------------------------------------- tuple filtering

def test_filter_examples():
    ident = uniform_tuple([[0, 0, 0], [0, 0, 0]])
    far = uniform_tuple([[0.6, 0, 0], [0, 0.6, 0]])
    assert filter_tuples([ident, far]) == [far]


def test_filter_removes_tuples_without_valid_pixels(caplog):
    t = uniform_tuple([[1.0, 0, 0]])
    t.motions[0].valid[:] = False
    with caplog.at_level(logging.INFO):
        assert filter_tuples([t]) == []
    assert "no valid motion pixels" in caplog.text


def test_filter_partition_matches_direct_mean():
    rng = np.random.default_rng(0)
    tuples = []
    for _ in range(30):
        ts = [rng.normal(0, 0.35, 3) for _ in range(3)]
        t = uniform_tuple(ts)
        for m in t.motions:
            m.valid &= rng.random(m.valid.shape) < 0.7
        tuples.append(t)
    kept = filter_tuples(tuples)
    for t in tuples:
        vals = np.concatenate([np.linalg.norm(m.translation[m.valid], axis=-1) for m in t.motions])
        assert np.isclose(tuple_mean_baseline(t), vals.mean(), rtol=1e-12)
        assert (t in kept) == (vals.mean() >= 0.5)
    assert 0 < len(kept) < len(tuples)


def test_filter_is_idempotent():
    tuples = [uniform_tuple([[s, 0, 0], [0, s, 0]]) for s in (0.1, 0.45, 0.5, 0.7)]
    once = filter_tuples(tuples)
    assert filter_tuples(once) == once
    assert len(once) == 2


# --------------------------------------------------------------------------- grouping

def test_group_target_15():
    groups = dict(group_tuples(30))
    assert groups[15] == [6, 7, 8, 10, 11, 19, 20, 22, 23, 24]


def test_group_drops_out_of_range_references():
    groups = dict(group_tuples(30))
    assert groups[3] == [7, 8, 10, 11, 12]
    assert groups[27] == [18, 19, 20, 22, 23]


def test_group_matches_brute_force():
    for n in (10, 17, 30, 41):
        for gap in (1, 3, 4):
            expected = []
            for t in range(n):
                if t % gap:
                    continue
                refs = [r for r in range(n) if (r - t) in REFERENCE_OFFSETS]
                if len(refs) >= 2:
                    expected.append((t, refs))
            assert group_tuples(n, gap) == expected


def test_group_short_sequence_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert group_tuples(9) == []
    assert "too short" in caplog.text


def test_group_rejects_bad_gap():
    with pytest.raises(InputError):
        group_tuples(30, gap=0)


def test_tuple_list_round_trip():
    groups = group_tuples(30)
    text = format_tuple_list(groups)
    assert text.splitlines()[5] == "15: 6,7,8,10,11,19,20,22,23,24"
    assert parse_tuple_list(text) == groups
    assert parse_tuple_list("# comment\n\n3: 7, 8\n") == [(3, [7, 8])]


def test_tuple_list_rejects_garbage():
    with pytest.raises(InputError):
        parse_tuple_list("3 7 8\n")


# --------------------------------------------------------------------------- tuple assembly

def test_build_frame_tuple_shapes_and_masks():
    scene = synth.generate_scene(seed=0, frames=12, motion_kind="rigid", K=synth.default_intrinsics(48), density=0.4)
    images, _ = synth.render_sequence(scene)
    cache = MotionCache(scene.sequence, scene.K)
    tup = build_frame_tuple(cache, images, 0, [4, 9])
    assert tup.offsets == [4, 9]
    assert np.array_equal(tup.silhouette, render_depth(scene.base_mesh(0), scene.K).valid)
    for m, mask in zip(tup.motions, tup.masks):
        assert not np.any(mask & ~m.valid)


def test_frame_tuple_validates_shapes():
    t = uniform_tuple([[0.1, 0, 0]])
    with pytest.raises(InputError):
        FrameTuple(0, [1], t.K, t.image, [np.zeros((3, 3, 3))], t.motions, t.masks, t.base)
    with pytest.raises(InputError):
        FrameTuple(0, [1, 2], t.K, t.image, t.ref_images, t.motions, t.masks, t.base)
