import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from priorrecon import geomcore as g


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def random_pose(rng, scale=2.0):
    return g.Pose.from_rt(random_rotation(rng), rng.normal(size=3) * scale)


# -- quaternions ------------------------------------------------------------

def test_quat_identity():
    np.testing.assert_array_equal(g.quat_from_matrix(np.eye(3)), [1, 0, 0, 0])


def test_quat_half_turn_about_z():
    R = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(g.quat_from_matrix(R), [0, 0, 0, 1], atol=1e-15)


def test_quat_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        R = random_rotation(rng)
        q = g.quat_from_matrix(R)
        assert q[0] >= 0
        assert abs(np.linalg.norm(q) - 1) < 1e-9
        np.testing.assert_allclose(g.quat_to_matrix(q), R, atol=1e-9)


@given(st.floats(-math.pi, math.pi), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 1))
def test_quat_round_trip_axis_angle(angle, ax, ay, az):
    R = g.axis_angle_matrix([ax, ay, az], angle)
    np.testing.assert_allclose(g.quat_to_matrix(g.quat_from_matrix(R)), R, atol=1e-9)


def test_quat_rejects_non_rotation():
    with pytest.raises(g.InvalidRotationError):
        g.quat_from_matrix(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(g.InvalidRotationError):
        g.quat_from_matrix(np.eye(3) * 1.01)


# -- camera set normalization ------------------------------------------------

def _cams_at(centers, rng=None):
    rng = rng or np.random.default_rng(1)
    poses = []
    for c in centers:
        R = random_rotation(rng)
        poses.append(g.Pose.from_rt(R, -R @ np.asarray(c, dtype=float)))
    intr = [g.Intrinsics.centered(30.0, 32, 32)] * len(centers)
    return g.CameraSet(poses, intr)


def test_normalize_two_cameras():
    cams = g.normalize_camera_set(_cams_at([(0, 0, 0), (2, 0, 0)]))
    np.testing.assert_allclose(cams.normalization.centroid, [1, 0, 0], atol=1e-12)
    assert cams.normalization.scale == pytest.approx(1.0)
    np.testing.assert_allclose(cams.centers, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)


def test_normalize_single_camera_clamps_scale():
    cams = g.normalize_camera_set(_cams_at([(0, 0, 0)]))
    assert cams.normalization.scale == g.DEGENERATE_SCALE_EPS
    np.testing.assert_allclose(cams.centers, [[0, 0, 0]], atol=1e-12)


def test_normalize_idempotent_and_invertible():
    rng = np.random.default_rng(2)
    cams = _cams_at(rng.normal(size=(6, 3)) * 5 + 3, rng)
    once = g.normalize_camera_set(cams)
    twice = g.normalize_camera_set(once)
    np.testing.assert_allclose(np.linalg.norm(once.centers, axis=1).max(), 1.0, atol=1e-9)
    np.testing.assert_allclose(twice.centers, once.centers, atol=1e-9)
    back = g.denormalize_camera_set(once)
    for a, b in zip(back.poses, cams.poses):
        np.testing.assert_allclose(a.trans, b.trans, atol=1e-9)
        np.testing.assert_allclose(a.quat, b.quat, atol=1e-12)


def test_relative_to_first_makes_reference_identity():
    rng = np.random.default_rng(3)
    cams = _cams_at(rng.normal(size=(3, 3)), rng)
    rel = g.relative_to_first(cams)
    np.testing.assert_allclose(rel.poses[0].matrix(), np.eye(4), atol=1e-12)
    # relative transforms between any pair are preserved
    a = cams.poses[2].compose(cams.poses[1].inverse()).matrix()
    b = rel.poses[2].compose(rel.poses[1].inverse()).matrix()
    np.testing.assert_allclose(a, b, atol=1e-9)


# -- projection ----------------------------------------------------------------

def test_backproject_principal_point():
    intr = g.Intrinsics(20.0, 20.0, 2.5, 3.5, 6, 8)
    depth = np.ones((8, 6))
    pm = g.backproject(depth, intr, g.Pose.identity())
    np.testing.assert_allclose(pm.points[3, 2], [0, 0, 1], atol=1e-15)


def test_backproject_plane_is_coplanar():
    rng = np.random.default_rng(4)
    pose = random_pose(rng)
    intr = g.Intrinsics(25.0, 27.0, 15.0, 17.0, 32, 30)
    pm = g.backproject(np.full((30, 32), 2.5), intr, pose)
    pts = pm.points.reshape(-1, 3)
    # plane-fit oracle: the smallest singular value of the centred cloud is the residual
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    assert sv[-1] / math.sqrt(len(pts)) < 1e-9


def test_backproject_project_round_trip():
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    intr = g.Intrinsics(31.0, 29.0, 16.2, 15.7, 32, 32)
    depth = rng.uniform(0.5, 5.0, size=(32, 32))
    depth[3, 4] = -1.0
    pm = g.backproject(depth, intr, pose)
    assert not pm.validity[3, 4]
    u, v, z = g.project(pm.points, intr, pose)
    uu, vv = g.pixel_grid(32, 32)
    ok = pm.validity
    np.testing.assert_allclose(u[ok], uu[ok], atol=1e-6)
    np.testing.assert_allclose(v[ok], vv[ok], atol=1e-6)
    np.testing.assert_allclose(z[ok], depth[ok], atol=1e-6)


# -- pseudo normals -----------------------------------------------------------

def test_pseudo_normals_fronto_parallel():
    intr = g.Intrinsics.centered(30.0, 24, 24)
    n, ok = g.pseudo_normals_from_depth(np.full((24, 24), 3.0), intr)
    assert ok.all()
    np.testing.assert_allclose(n, np.broadcast_to([0, 0, -1], n.shape), atol=1e-9)


def _angles_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, -1), -1, 1)))


def test_pseudo_normals_tilted_plane():
    intr = g.Intrinsics.centered(40.0, 32, 32)
    normal = np.array([0.3, -0.2, -1.0])
    normal /= np.linalg.norm(normal)
    # plane normal . p = -2  => along ray (x', y', 1) * z
    u, v = g.pixel_grid(32, 32)
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1)
    depth = -2.0 / (rays @ normal)
    n, ok = g.pseudo_normals_from_depth(depth, intr)
    assert ok.all()
    assert _angles_deg(n, normal).max() < 0.5
    assert np.all(np.sum(n * rays, -1) < 0)


def test_pseudo_normals_sphere():
    intr = g.Intrinsics.centered(60.0, 64, 64)
    center, radius = np.array([0.0, 0.0, 3.0]), 1.0
    u, v = g.pixel_grid(64, 64)
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    b = d @ center
    disc = b ** 2 - (center @ center - radius ** 2)
    hit = disc > 0
    t = np.where(hit, b - np.sqrt(np.where(hit, disc, 0)), np.nan)
    p = d * t[..., None]
    depth = np.where(hit, p[..., 2], 0.0)
    analytic = (p - center) / radius
    n, ok = g.pseudo_normals_from_depth(depth, intr)
    # interior: every pixel of the 5x5 window lies on the sphere, plus one pixel margin
    from scipy.ndimage import binary_erosion
    interior = binary_erosion(hit, np.ones((7, 7)))
    assert interior.sum() > 500
    assert ok[interior].all()
    err = _angles_deg(n[interior], analytic[interior])
    assert err.mean() < 2.0


# -- umeyama ----------------------------------------------------------------------

def test_umeyama_identity():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(20, 3))
    s, R, t = g.umeyama_align(pts, pts)
    assert s == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_umeyama_recovers_constructed_sim3():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(50, 3))
    Rz = g.axis_angle_matrix([0, 0, 1], math.radians(30))
    dst = 2.0 * src @ Rz.T + np.array([1.0, 2.0, 3.0])
    s, R, t = g.umeyama_align(src, dst)
    assert abs(s - 2.0) < 1e-9
    np.testing.assert_allclose(R, Rz, atol=1e-9)
    np.testing.assert_allclose(t, [1, 2, 3], atol=1e-9)


def test_umeyama_without_scale():
    rng = np.random.default_rng(8)
    src = rng.normal(size=(30, 3))
    R0 = random_rotation(rng)
    dst = src @ R0.T + 0.5
    s, R, t = g.umeyama_align(src, dst, with_scale=False)
    assert s == 1.0
    np.testing.assert_allclose(R, R0, atol=1e-9)


def _rmse(src, dst, s, R, t):
    return float(np.sqrt(np.mean(np.sum((g.apply_sim3(src, s, R, t) - dst) ** 2, -1))))


def test_umeyama_beats_grid_search_on_noisy_data():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(40, 3))
    R0 = g.axis_angle_matrix([0.2, 1.0, -0.3], 0.7)
    dst = 1.3 * src @ R0.T + np.array([0.3, -0.1, 2.0]) + rng.normal(scale=0.05, size=src.shape)
    best = _rmse(src, dst, *g.umeyama_align(src, dst))
    # coarse oracle over Euler angles and scale; translation set to the centroid gap
    grid = np.radians(np.arange(-180, 180, 15))
    scales = np.linspace(0.8, 1.8, 11)
    oracle = np.inf
    for a in grid:
        for b in grid[(grid >= -np.pi / 2) & (grid <= np.pi / 2)]:
            for c in grid:
                R = Rotation.from_euler("zyx", [a, b, c]).as_matrix()
                rot = src @ R.T
                for s in scales:
                    t = dst.mean(0) - s * rot.mean(0)
                    oracle = min(oracle, float(np.sqrt(np.mean(np.sum((s * rot + t - dst) ** 2, -1)))))
    assert best <= oracle + 1e-12
    assert best < 0.1


def test_umeyama_degenerate():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(g.DegenerateAlignmentError):
        g.umeyama_align(line, line)
    with pytest.raises(g.DegenerateAlignmentError):
        g.umeyama_align(line[:2], line[:2])


# -- camera JSON ---------------------------------------------------------------

def test_camera_json_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    cams = _cams_at(rng.normal(size=(3, 3)), rng)
    g.save_cameras(tmp_path / "cameras.json", cams)
    back = g.load_cameras(tmp_path / "cameras.json")
    for a, b in zip(cams.poses, back.poses):
        np.testing.assert_array_equal(a.quat, b.quat)
        np.testing.assert_array_equal(a.trans, b.trans)
    assert back.intrinsics == cams.intrinsics


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d["views"][1].pop("fx"), "views[1].fx"),
    (lambda d: d["views"][0].__setitem__("quat", [1, 0, 0]), "views[0].quat"),
    (lambda d: d["views"][0].__setitem__("width", "wide"), "views[0].width"),
    (lambda d: d.pop("views"), "views"),
])
def test_camera_json_schema_errors_name_field(tmp_path, mutate, field):
    doc = g.cameras_to_dict(_cams_at([(0, 0, 0), (1, 0, 0)]))
    mutate(doc)
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(g.CameraSchemaError, match=field.replace("[", r"\[").replace("]", r"\]")):
        g.load_cameras(tmp_path / "c.json")


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=6))
def test_normalized_centers_within_unit_ball(centers):
    pts = np.array(centers)
    if np.linalg.norm(pts - pts.mean(0), axis=1).max() < 1e-3:
        return
    cams = g.normalize_camera_set(_cams_at(pts))
    assert abs(np.linalg.norm(cams.centers, axis=1).max() - 1.0) < 1e-6


@given(st.integers(0, 10_000))
def test_orient_toward_camera(seed):
    rng = np.random.default_rng(seed)
    intr = g.Intrinsics(rng.uniform(10, 40), rng.uniform(10, 40), 8.0, 6.0, 16, 12)
    n = rng.normal(size=(12, 16, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    out = g.orient_toward_camera(n, intr)
    rays = g.camera_points(np.ones((12, 16)), intr)
    assert np.all(np.einsum("hwc,hwc->hw", out, rays) <= 0)
    np.testing.assert_array_equal(np.abs(out), np.abs(n))
    np.testing.assert_array_equal(g.orient_toward_camera(out, intr), out)
