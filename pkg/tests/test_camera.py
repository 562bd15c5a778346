import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiltrecon.camera import (
    CameraPose, TrajectoryConfig, ViewRole, apply_relative, left_alias, look_at_pose, main_view_poses,
    poses_from_json, poses_to_json, relative_pose, tilt_trajectory, wrap_degrees,
)
from tiltrecon.errors import DegenerateUpError


def assert_pose_invariants(pose, atol=1e-9):
    R = pose.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=atol)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=atol)
    c = pose.center
    assert np.linalg.norm(c) == pytest.approx(pose.radius, abs=atol)
    # optical axis passes through the origin
    np.testing.assert_allclose(pose.forward, -c / np.linalg.norm(c), atol=atol)
    # the world origin projects onto the principal point
    cam = R @ np.zeros(3) + pose.translation
    assert abs(cam[0]) < atol and abs(cam[1]) < atol and cam[2] > 0


def spherical(az, el, r):
    a, e = math.radians(az), math.radians(el)
    return r * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


@pytest.mark.parametrize("az,el,r,center", [
    (0, 0, 2, (2, 0, 0)),
    (90, 0, 2, (0, 2, 0)),
])
def test_look_at_axis_cases(az, el, r, center):
    pose = look_at_pose(az, el, r)
    np.testing.assert_allclose(pose.center, center, atol=1e-12)
    assert_pose_invariants(pose)


def test_look_at_oblique_matches_spherical_formula():
    pose = look_at_pose(45, 30, 1)
    expected = (math.cos(math.radians(30)) * math.cos(math.radians(45)),
                math.cos(math.radians(30)) * math.sin(math.radians(45)), math.sin(math.radians(30)))
    np.testing.assert_allclose(pose.center, expected, atol=1e-12)
    assert_pose_invariants(pose)


def test_camera_axes_convention():
    pose = look_at_pose(0, 0, 2)
    # x right, y down, z forward; world up is +Z so camera y is -Z
    np.testing.assert_allclose(pose.rotation[1], [0, 0, -1], atol=1e-12)
    np.testing.assert_allclose(pose.rotation[2], [-1, 0, 0], atol=1e-12)


@pytest.mark.parametrize("el", [90, -90, 120])
def test_look_at_rejects_vertical(el):
    with pytest.raises(DegenerateUpError):
        look_at_pose(0, el, 2)


def test_look_at_rejects_bad_radius():
    with pytest.raises(ValueError):
        look_at_pose(0, 0, 0)


@given(st.floats(-720, 720), st.floats(-89.5, 89.5), st.floats(0.1, 10))
def test_look_at_invariants_property(az, el, r):
    pose = look_at_pose(az, el, r)
    assert_pose_invariants(pose, atol=1e-9)
    np.testing.assert_allclose(pose.center, spherical(az, el, r), atol=1e-9)


@pytest.mark.parametrize("n,expected", [(4, [0, 90, 180, 270]), (2, [0, 180]), (6, [0, 60, 120, 180, 240, 300])])
def test_main_view_azimuths(n, expected):
    poses = main_view_poses(TrajectoryConfig(num_main_views=n))
    assert [p.azimuth_deg for _, p in poses] == pytest.approx(expected)
    assert all(p.elevation_deg == 0 for _, p in poses)


def test_default_trajectory_twelve_poses():
    traj = tilt_trajectory(TrajectoryConfig())
    assert len(traj) == 12
    az = [p.azimuth_deg for _, p in traj]
    assert az == pytest.approx([30.0 * k for k in range(12)])
    interp = [p.elevation_deg for r, p in traj if not r.is_main]
    assert interp == [30, -30] * 4
    assert [str(r) for r, _ in traj[:3]] == ["main:0", "interp_right:0:1", "interp_right:0:2"]


def test_trajectory_without_interpolation():
    traj = tilt_trajectory(TrajectoryConfig(num_interp=0))
    assert len(traj) == 4
    assert all(r.is_main for r, _ in traj)


def test_trajectory_without_elevation():
    traj = tilt_trajectory(TrajectoryConfig(interp_elevation_pattern=[0]))
    assert all(p.elevation_deg == 0 for _, p in traj)


@pytest.mark.parametrize("kwargs", [
    {"num_main_views": 1}, {"num_interp": -1}, {"radius": 0}, {"interp_elevation_pattern": []},
    {"interp_elevation_pattern": [90]},
])
def test_trajectory_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrajectoryConfig(**kwargs)


configs = st.builds(
    TrajectoryConfig,
    num_main_views=st.integers(2, 8),
    num_interp=st.integers(0, 4),
    radius=st.floats(0.5, 5),
    interp_elevation_pattern=st.lists(st.floats(-60, 60), min_size=1, max_size=3),
)


@settings(max_examples=40, deadline=None)
@given(configs)
def test_trajectory_properties(cfg):
    traj = tilt_trajectory(cfg)
    n_main, n = cfg.num_main_views, cfg.num_interp
    assert len(traj) == n_main * (n + 1)
    for _, pose in traj:
        assert_pose_invariants(pose)
    az = np.array([p.azimuth_deg for _, p in traj])
    assert np.all(np.diff(az) > 0)
    # the azimuth multiset is symmetric under a 360/N rotation
    rotated = np.sort((az + 360.0 / n_main) % 360.0)
    np.testing.assert_allclose(rotated, np.sort(az % 360.0), atol=1e-9)
    # elevations follow the pattern cyclically
    elevs = [p.elevation_deg for r, p in traj if not r.is_main]
    pat = cfg.interp_elevation_pattern
    assert elevs == [pat[k % len(pat)] for k in range(len(elevs))]


@given(st.integers(2, 8), st.integers(1, 4), st.floats(1, 60))
def test_symmetric_pattern_has_zero_mean_elevation(n_main, n, e):
    cfg = TrajectoryConfig(n_main, n, 2.5, [e, -e])
    elevs = [p.elevation_deg for r, p in tilt_trajectory(cfg) if not r.is_main]
    if (n_main * n) % 2 == 0:
        assert sum(elevs) == 0.0
    else:
        # an odd number of interpolated views leaves one +e unmatched
        assert sum(elevs) == pytest.approx(e)


def test_left_alias_names_same_view_from_other_side():
    cfg = TrajectoryConfig()
    assert left_alias(ViewRole("interp_right", 0, 1), cfg) == ViewRole("interp_left", 1, 2)
    assert left_alias(ViewRole("interp_right", 3, 2), cfg) == ViewRole("interp_left", 0, 1)
    with pytest.raises(ValueError):
        left_alias(ViewRole("main", 0), cfg)


def test_view_role_string_round_trip():
    for role in [ViewRole("main", 3), ViewRole("interp_left", 1, 2), ViewRole("interp_right", 0, 1)]:
        assert ViewRole.parse(str(role)) == role
    with pytest.raises(ValueError):
        ViewRole("main", 0, 1)
    with pytest.raises(ValueError):
        ViewRole("interp_right", 0, 0)
    with pytest.raises(ValueError):
        ViewRole.parse("bogus")


@pytest.mark.parametrize("cond,target,expected", [
    ((0, 0, 2), (0, 0, 2), (0, 0, 0)),
    ((0, 0, 2), (30, 0, 2), (30, 0, 0)),
    ((350, 0, 2), (10, 0, 2), (20, 0, 0)),
    ((10, 0, 2), (350, 0, 2), (-20, 0, 0)),
    ((0, 10, 2), (90, -20, 3), (90, -30, 1)),
])
def test_relative_pose(cond, target, expected):
    assert relative_pose(look_at_pose(*cond), look_at_pose(*target)) == pytest.approx(expected)


def test_wrap_degrees_range():
    assert wrap_degrees(180) == 180
    assert wrap_degrees(-180) == 180
    assert wrap_degrees(540) == 180
    assert wrap_degrees(-190) == pytest.approx(170)


@given(st.floats(0, 360), st.floats(-60, 60), st.floats(0.5, 4), st.floats(0, 360), st.floats(-60, 60),
       st.floats(0.5, 4))
def test_relative_round_trip(az1, el1, r1, az2, el2, r2):
    cond, target = look_at_pose(az1, el1, r1), look_at_pose(az2, el2, r2)
    recovered = apply_relative(cond, relative_pose(cond, target))
    assert recovered.allclose(target, atol=1e-9)


def test_pose_json_round_trip():
    traj = tilt_trajectory(TrajectoryConfig())
    back = poses_from_json(poses_to_json(traj))
    assert [r for r, _ in back] == [r for r, _ in traj]
    for (_, a), (_, b) in zip(traj, back):
        assert a.allclose(b, atol=0)
        assert a.azimuth_deg == b.azimuth_deg
    doc = json.loads(poses_to_json(traj))
    assert set(doc[0]) == {"role", "azimuth_deg", "elevation_deg", "radius", "R", "T"}
    assert len(doc[0]["R"]) == 9 and len(doc[0]["T"]) == 3


def test_pose_json_rejects_non_list():
    with pytest.raises(ValueError):
        poses_from_json('{"role": "main:0"}')


def test_camera_pose_dict_round_trip():
    p = look_at_pose(12.5, -7, 1.7)
    q = CameraPose.from_dict(p.to_dict())
    assert p.allclose(q, atol=0)
