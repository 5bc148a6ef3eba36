import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import maximum_filter, minimum_filter

from priorrecon import synthdata as sd
from priorrecon.config import ConfigError, ResolutionPolicy
from priorrecon.geomcore import Intrinsics, backproject, pseudo_normals_from_depth


def test_same_seed_bit_identical():
    a, b = sd.generate_scene(11, 3), sd.generate_scene(11, 3)
    for f in ("images", "depths", "normals", "pointmaps", "valid", "labels"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    for p, q in zip(a.cams.poses, b.cams.poses):
        assert np.array_equal(p.quat, q.quat) and np.array_equal(p.trans, q.trans)


def test_different_seeds_differ():
    assert not np.array_equal(sd.generate_scene(1).images, sd.generate_scene(2).images)


def test_sample_contents():
    s = sd.generate_scene(4, n_views=4, height=32, width=48)
    assert s.images.shape == (4, 32, 48, 3) and s.images.dtype == np.float32
    assert s.depths.shape == (4, 32, 48) and s.normals.shape == (4, 32, 48, 3)
    assert s.images.min() >= 0 and s.images.max() <= 1
    assert s.valid.all()
    np.testing.assert_array_equal(s.cams.poses[0].quat, [1, 0, 0, 0])
    np.testing.assert_array_equal(s.cams.poses[0].trans, [0, 0, 0])
    c = s.cams.centers
    assert np.linalg.norm(c - c.mean(0), axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_pointmap_matches_backprojected_depth(seed):
    s = sd.generate_scene(seed)
    for i in range(s.num_views):
        pm = backproject(s.depths[i].astype(np.float64), s.cams.intrinsics[i], s.cams.poses[i])
        np.testing.assert_allclose(s.pointmaps[i], pm.points, atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_plane_fit_agrees_with_normals(seed):
    s = sd.generate_scene(seed, height=48, width=48)
    for i in range(s.num_views):
        n, ok = pseudo_normals_from_depth(s.depths[i].astype(np.float64), s.cams.intrinsics[i], 5)
        smooth = ok & (minimum_filter(s.labels[i], 5) == maximum_filter(s.labels[i], 5))
        for c in range(3):
            smooth &= maximum_filter(s.normals[i][..., c], 5) - minimum_filter(s.normals[i][..., c], 5) < 1e-4
        ang = np.degrees(np.arccos(np.clip((n * s.normals[i]).sum(-1), -1, 1)))
        assert smooth.sum() > 100
        assert ang[smooth].max() < 3.0


def test_normals_face_the_camera():
    s = sd.generate_scene(6)
    for i in range(s.num_views):
        k = s.cams.intrinsics[i]
        jj, ii = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5)
        rays = np.stack([(jj - k.cx) / k.fx, (ii - k.cy) / k.fy, np.ones_like(jj)], -1)
        assert np.all((rays * s.normals[i]).sum(-1) < 0)


def test_sphere_normals_are_radial():
    rng = np.random.default_rng(0)
    mat = sd._random_material(rng)
    center = np.array([0.1, -0.2, 0.4])
    world = sd._World([mat] * 6, [sd._Sphere(center, 0.4, mat)], np.array([[0, 0, 2.5], [1, 1, 2.5]]))
    pose = sd.look_at(np.array([2.0, 0.5, 1.0]), center)
    intr = Intrinsics.centered(30.0, 32, 32)
    _, depth, normals, labels = sd._render_view(world, pose, intr, 1)
    hit = labels == 6
    assert hit.sum() > 50
    pts = backproject(depth, intr, pose).points[hit]
    radial = (pts - center) / 0.4
    np.testing.assert_allclose(normals[hit], radial @ pose.R.T, atol=1e-6)


def test_requires_two_views():
    with pytest.raises(ValueError):
        sd.generate_scene(0, n_views=1)


def test_impossible_rig_gives_up():
    spec = sd.SceneSpec(radius=(5.0, 6.0), max_retries=3)
    with pytest.raises(sd.SceneGenerationError):
        sd.generate_scene(0, spec=spec)


# -- resolution sampling --------------------------------------------------------

def test_full_scale_policy_defaults():
    p = ResolutionPolicy()
    assert (p.min_pixels, p.max_pixels, p.aspect_min, p.aspect_max) == (100_000, 250_000, 0.5, 2.0)


def test_desk_multiplier_bounds():
    rng = np.random.default_rng(0)
    policy = ResolutionPolicy(multiplier=0.02)
    for _ in range(1000):
        h, w = sd.sample_resolution(policy, rng, patch=16)
        assert 2000 <= h * w <= 5000
        assert 0.5 <= h / w <= 2.0
        assert h % 16 == 0 and w % 16 == 0


@given(st.integers(1000, 20000), st.floats(1.0, 3.0), st.sampled_from([8, 14, 16]))
def test_sampled_resolution_within_bounds(lo, span, patch):
    policy = ResolutionPolicy(min_pixels=lo, max_pixels=int(lo * span))
    try:
        h, w = sd.sample_resolution(policy, np.random.default_rng(lo), patch)
    except ConfigError:
        assert not sd.resolution_candidates(policy, patch)
        return
    assert lo <= h * w <= int(lo * span) and h % patch == 0 and w % patch == 0
    assert 0.5 <= h / w <= 2.0


def test_unsatisfiable_policy():
    with pytest.raises(ConfigError):
        sd.sample_resolution(ResolutionPolicy(min_pixels=300, max_pixels=320), np.random.default_rng(0), 16)


# -- persistence ----------------------------------------------------------------

def test_round_trip(tmp_path):
    s = sd.generate_scene(8, n_views=3)
    path = sd.write_scene(s, tmp_path)
    assert path.name == "scene_8"
    names = {p.name for p in path.iterdir()}
    assert {"view_0.png", "depth_2.bin", "normal_1.bin", "cameras.json", "manifest.json"} <= names
    r = sd.read_scene(path)
    assert np.array_equal(r.depths, s.depths)
    assert np.array_equal(r.normals, s.normals)
    assert np.array_equal(r.pointmaps, s.pointmaps)
    assert np.array_equal(r.labels, s.labels)
    assert np.abs(r.images - s.images).max() <= 1 / 255
    assert r.seed == 8 and r.scale == s.scale and r.spec == s.spec
    for p, q in zip(r.cams.poses, s.cams.poses):
        np.testing.assert_allclose(p.matrix(), q.matrix(), atol=1e-12)
    assert sd.list_scenes(tmp_path) == [path]


def test_missing_normals_file(tmp_path):
    path = sd.write_scene(sd.generate_scene(0, n_views=2), tmp_path)
    (path / "normal_1.bin").unlink()
    with pytest.raises(sd.SceneFormatError, match="normal_1.bin"):
        sd.read_scene(path)


@pytest.mark.parametrize("field", ["views", "seed", "scale", "spec"])
def test_corrupt_manifest_names_field(tmp_path, field):
    path = sd.write_scene(sd.generate_scene(0, n_views=2), tmp_path)
    doc = json.loads((path / "manifest.json").read_text())
    doc[field] = "garbage"
    (path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(sd.SceneFormatError, match=field):
        sd.read_scene(path)


def test_unparseable_manifest(tmp_path):
    path = sd.write_scene(sd.generate_scene(0, n_views=2), tmp_path)
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(sd.SceneFormatError):
        sd.read_scene(path)
