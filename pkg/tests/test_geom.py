import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carmreg.errors import BehindSource, FormatError, InvalidPose
from carmreg.geom import (IDENTITY, CArmPose, DetectorSpec, RigidTransform, carm_extrinsics, compose,
                          euler_to_rotation, invert, load_pose, project_point, project_points,
                          rotation_to_euler, save_pose)

from conftest import random_pose

angles = st.floats(-89.0, 89.0)


def homogeneous_oracle(pose, det, p_ct):
    """Independent 3x4 pinhole, built from the gantry frame in homogeneous form."""
    rot = pose.rotation
    world_from_ct = np.eye(4)
    world_from_ct[:3, 3] = -np.asarray(pose.isocenter_mm)
    # camera frame: origin at source, axes = gantry axes
    cam_from_world = np.eye(4)
    cam_from_world[:3, :3] = rot.T
    cam_from_world[:3, 3] = -rot.T @ (rot @ np.array([0.0, 0.0, -pose.ssd_mm]))
    cu, cv = det.principal_point_px
    f = pose.sid_mm / det.pitch_mm
    k = np.array([[f, 0, cu], [0, f, cv], [0, 0, 1.0]])
    proj = k @ np.hstack([np.eye(3), np.zeros((3, 1))]) @ cam_from_world @ world_from_ct
    h = proj @ np.append(p_ct, 1.0)
    return h[:2] / h[2]


@given(angles, angles, angles)
def test_euler_round_trip(rx, ry, rz):
    r = euler_to_rotation(rx, ry, rz)
    back = rotation_to_euler(r)
    np.testing.assert_allclose(euler_to_rotation(*back), r, atol=1e-12)


@given(angles, angles, angles)
def test_rotation_is_proper(rx, ry, rz):
    r = euler_to_rotation(rx, ry, rz)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_euler_order_is_z_x_y():
    r = euler_to_rotation(10, 20, 30)
    rx = euler_to_rotation(10, 0, 0)
    ry = euler_to_rotation(0, 20, 0)
    rz = euler_to_rotation(0, 0, 30)
    np.testing.assert_allclose(r, rz @ rx @ ry, atol=1e-15)


def test_compose_invert(rng):
    a = RigidTransform(euler_to_rotation(*rng.uniform(-40, 40, 3)), rng.normal(size=3) * 10)
    b = RigidTransform(euler_to_rotation(*rng.uniform(-40, 40, 3)), rng.normal(size=3) * 10)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((a @ invert(a)).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(RigidTransform.from_matrix(a.matrix()).matrix(), a.matrix())
    assert np.allclose(IDENTITY.apply(p), p)


def test_rigid_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_pose_validation():
    with pytest.raises(InvalidPose):
        CArmPose(sid_mm=700, ssd_mm=750)
    with pytest.raises(InvalidPose):
        CArmPose(ssd_mm=0.0)
    with pytest.raises(InvalidPose):
        CArmPose(alpha_deg=math.nan)


def test_source_and_detector_distances(rng):
    for _ in range(20):
        pose = random_pose(rng)
        m = carm_extrinsics(pose)
        assert np.linalg.norm(m.source_mm) == pytest.approx(pose.ssd_mm, rel=1e-12)
        assert np.linalg.norm(m.detector_center_mm - m.source_mm) == pytest.approx(pose.sid_mm, rel=1e-12)
        np.testing.assert_allclose(m.view_direction, (m.detector_center_mm - m.source_mm) / pose.sid_mm,
                                   atol=1e-12)


def test_zero_angle_frame(ap_pose):
    m = carm_extrinsics(ap_pose)
    np.testing.assert_allclose(m.source_mm, [0, 0, -750])
    np.testing.assert_allclose(m.view_direction, [0, 0, 1])
    np.testing.assert_allclose(m.detector_u_axis, [1, 0, 0])
    np.testing.assert_allclose(m.detector_v_axis, [0, 1, 0])


def test_isocenter_hits_principal_point(rng):
    for _ in range(100):
        pose = random_pose(rng)
        det = DetectorSpec(512, 512, 0.5, principal_point_px=tuple(rng.uniform(100, 400, 2)))
        uv = project_point(carm_extrinsics(pose, det), pose.isocenter_mm)
        np.testing.assert_allclose(uv, det.principal_point_px, atol=1e-9)


def test_project_matches_oracle(rng):
    for _ in range(50):
        pose = random_pose(rng)
        det = DetectorSpec()
        m = carm_extrinsics(pose, det)
        pts = np.asarray(pose.isocenter_mm) + rng.uniform(-150, 150, (10, 3))
        got = project_points(m, pts)
        want = np.array([homogeneous_oracle(pose, det, p) for p in pts])
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_magnification_on_central_axis(ap_pose):
    m = carm_extrinsics(ap_pose)
    # a 10 mm lateral offset at the isocenter plane is magnified by sid/ssd
    uv = project_point(m, [10.0, 0.0, 0.0])
    assert (uv[0] - 256.0) * 0.5 == pytest.approx(10.0 * 1000 / 750, rel=1e-12)


def test_behind_source(ap_pose):
    m = carm_extrinsics(ap_pose)
    with pytest.raises(BehindSource):
        project_point(m, [0.0, 0.0, -800.0])
    with pytest.raises(BehindSource):
        project_point(m, [0.0, 0.0, -750.0])


def test_detector_validation():
    with pytest.raises(ValueError):
        DetectorSpec(0, 10)
    with pytest.raises(ValueError):
        DetectorSpec(10, 10, pitch_mm=-1)
    with pytest.raises(ValueError):
        DetectorSpec(10, 10, principal_point_px=(12.0, 1.0))
    assert DetectorSpec(352, 512).principal_point_px == (176.0, 256.0)


def test_pose_file_round_trip(tmp_path, rng):
    pose = random_pose(rng)
    save_pose(pose, tmp_path / "p.json", note="x")
    assert load_pose(tmp_path / "p.json") == pose
    rec = json.loads((tmp_path / "p.json").read_text())
    assert rec["note"] == "x"


def test_pose_file_errors(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_pose(tmp_path / "a.json")
    (tmp_path / "b.json").write_text(json.dumps({"alpha_deg": 0}))
    with pytest.raises(FormatError, match="missing"):
        load_pose(tmp_path / "b.json")
    (tmp_path / "c.json").write_text("[1, 2]")
    with pytest.raises(FormatError):
        load_pose(tmp_path / "c.json")


@settings(max_examples=50)
@given(st.floats(-2, 2), st.floats(0, 50), st.floats(-10, 10))
def test_projection_of_axis_points_stays_on_principal_point(a, b, g):
    pose = CArmPose(a, b, g, 1000.0, 750.0, (5.0, -3.0, 2.0))
    m = carm_extrinsics(pose)
    # every point on the central ray projects to the principal point
    p = np.asarray(pose.isocenter_mm) + 100.0 * m.view_direction
    np.testing.assert_allclose(project_point(m, p), (256.0, 256.0), atol=1e-9)
