import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdnf import synth
from ssdnf.field import rays_for_pose
from ssdnf.synth import Primitive, SceneSpec


def test_gen_scene_deterministic():
    assert synth.gen_scene(17) == synth.gen_scene(17)


def test_gen_scene_bounds_sweep():
    for seed in range(1000):
        spec = synth.gen_scene(seed)
        assert 1 <= len(spec.primitives) <= 4
        for p in spec.primitives:
            c = np.asarray(p.center)
            assert np.all(np.abs(c) <= 0.6) and 0.1 <= p.size <= 0.4
            assert np.all(np.abs(c) + p.size <= 1.0)
            assert all(0 <= a <= 1 for a in p.albedo)


def test_gen_scene_seeds_differ():
    specs = [synth.gen_scene(s) for s in range(200)]
    assert len({repr(s.primitives) for s in specs}) == 200


def test_empty_scene_is_white():
    img = synth.oracle_render(SceneSpec(0), synth.look_at((0, 0, 2.5)), synth.intrinsics_for(8, 8), 8, 8)
    np.testing.assert_array_equal(img, 1.0)


def test_sphere_center_lit_along_view_ray():
    spec = SceneSpec(0, (Primitive("sphere", (0.0, 0.0, 0.0), 0.3, (1.0, 0.0, 0.0)),))
    o = np.array([[0.0, 0.0, 2.5]])
    d = np.array([[0.0, 0.0, -1.0]])
    col = synth.shade_rays(spec, o, d, light_dir=-d[0])
    np.testing.assert_allclose(col, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_box_face_normal_and_nearest_hit():
    spec = SceneSpec(0, (Primitive("box", (0.0, 0.0, 0.0), 0.2, (0.0, 1.0, 0.0)),
                         Primitive("sphere", (0.0, 0.0, -0.6), 0.3, (0.0, 0.0, 1.0))))
    col = synth.shade_rays(spec, np.array([[0.0, 0.0, 2.5]]), np.array([[0.0, 0.0, -1.0]]),
                           light_dir=(0, 0, 1), ambient=0.0)
    np.testing.assert_allclose(col, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_oracle_is_repeatable():
    spec = synth.gen_scene(3)
    pose = synth.look_at((1.0, 2.0, 1.5))
    K = synth.intrinsics_for(16, 16)
    assert synth.oracle_render(spec, pose, K, 16, 16).tobytes() == synth.oracle_render(spec, pose, K, 16, 16).tobytes()


def test_sphere_silhouette_area_matches_projected_disk():
    r, dist, n = 0.5, 2.5, 64
    K = synth.intrinsics_for(n, n)
    spec = SceneSpec(0, (Primitive("sphere", (0.0, 0.0, 0.0), r, (0.2, 0.2, 0.2)),))
    img = synth.oracle_render(spec, synth.look_at((0.0, 0.0, dist)), K, n, n)
    hit = np.count_nonzero(np.any(img < 1.0, axis=-1))
    # silhouette cone half-angle asin(r/d); image-plane radius f * tan
    rad = K[0, 0] * np.tan(np.arcsin(r / dist))
    assert hit == pytest.approx(np.pi * rad ** 2, rel=0.05)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_look_at_points_at_origin(seed):
    rng = np.random.default_rng(seed)
    pose = synth.sphere_poses(1, rng)[0]
    assert np.linalg.norm(pose[:3, 3]) == pytest.approx(synth.CAMERA_RADIUS)
    np.testing.assert_allclose(pose[:3, :3] @ pose[:3, :3].T, np.eye(3), atol=1e-12)
    assert np.linalg.det(pose[:3, :3]) == pytest.approx(1.0)
    center = rays_for_pose(pose, synth.intrinsics_for(2, 2), 2, 2).dirs.mean(axis=(0, 1))
    np.testing.assert_allclose(center / np.linalg.norm(center), -pose[:3, 3] / synth.CAMERA_RADIUS,
                               atol=1e-9)


def test_turntable_ring():
    poses = synth.turntable_poses(8)
    assert poses.shape == (8, 4, 4)
    el = np.degrees(np.arcsin(poses[:, 1, 3] / synth.CAMERA_RADIUS))
    np.testing.assert_allclose(el, 30.0)


def test_make_dataset_shapes_and_ranges():
    ds = synth.make_dataset(3, 5, 8, 8, seed=1, n_test_scenes=2, n_views_test=20)
    assert [s.split for s in ds.scenes] == ["train"] * 3 + ["test"] * 2
    for s in ds.scenes:
        assert s.images.dtype == np.float32 and s.images.min() >= 0 and s.images.max() <= 1
        assert s.n_views == (5 if s.split == "train" else 20)


def test_make_dataset_sparse_subset_keeps_test_views():
    dense = synth.make_dataset(2, 6, 8, 8, seed=4, n_test_scenes=1, n_views_test=18)
    sparse = synth.make_dataset(2, 6, 8, 8, seed=4, sparse_view_subset=3, n_test_scenes=1, n_views_test=18)
    for d, s in zip(dense.split("train"), sparse.split("train")):
        assert s.n_views == 3
        # the kept views are a subset of the dense views of the same scene
        assert all(any(np.array_equal(p, q) for q in d.poses) for p in s.poses)
    assert sparse.split("test")[0].n_views == 18
    np.testing.assert_array_equal(sparse.split("test")[0].images, dense.split("test")[0].images)


def test_make_dataset_rejects_bad_args():
    with pytest.raises(ValueError):
        synth.make_dataset(0, 4, 8, 8, 0)
    with pytest.raises(ValueError):
        synth.make_dataset(1, 4, 8, 8, 0, sparse_view_subset=5)


def test_dataset_roundtrip_byte_identical(tmp_path):
    a = synth.make_dataset(2, 3, 8, 8, seed=9, n_test_scenes=1, n_views_test=17)
    synth.save_dataset(a, tmp_path / "a")
    synth.save_dataset(synth.make_dataset(2, 3, 8, 8, seed=9, n_test_scenes=1, n_views_test=17), tmp_path / "b")
    assert synth.dataset_digest(tmp_path / "a") == synth.dataset_digest(tmp_path / "b")
    back = synth.load_dataset(tmp_path / "a")
    for s, t in zip(a.scenes, back.scenes):
        assert s.scene_id == t.scene_id and s.spec == t.spec
        for field in ("images", "poses", "intrinsics"):
            assert getattr(s, field).tobytes() == getattr(t, field).tobytes()


def test_stored_poses_reproduce_pixels(tmp_path):
    ds = synth.make_dataset(1, 2, 8, 8, seed=5, n_test_scenes=0)
    s = ds.scenes[0]
    for img, pose in zip(s.images, s.poses):
        np.testing.assert_array_equal(synth.oracle_render(s.spec, pose, s.intrinsics, 8, 8), img)
