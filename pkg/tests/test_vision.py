import math

import numpy as np
import pytest

from coopvio import so3
from coopvio.state import CalibrationState
from coopvio.vision import (
    BearingObservation,
    FeatureTrack,
    ProjectionError,
    TriangulationError,
    camera_pose,
    distort,
    measurement_jacobians,
    pixel_to_normalized,
    project,
    transform_to_camera,
    triangulate,
    undistort,
)


def plain_calib(fx=1.0, fy=1.0, cx=0.0, cy=0.0, dist=(0, 0, 0, 0)):
    return CalibrationState(intrinsics=np.array([fx, fy, cx, cy, *dist], dtype=float))


def test_project_optical_axis():
    c = plain_calib()
    assert np.allclose(project([0.0, 0.0, 1.0], c.intrinsics), [0.0, 0.0])


def test_project_pinhole_arithmetic():
    c = plain_calib(fx=400.0, fy=400.0, cx=320.0, cy=240.0)
    uv = project([1.0, 0.0, 1.0], c.intrinsics)
    assert np.allclose(uv, [720.0, 240.0])


def test_project_rejects_behind_camera():
    c = plain_calib()
    with pytest.raises(ProjectionError):
        project([0.0, 0.0, -1.0], c.intrinsics)
    with pytest.raises(ProjectionError):
        project([0.0, 0.0, 0.01], c.intrinsics)


def test_undistort_round_trip_1000_points():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dist = rng.uniform(-0.1, 0.1, 4)
        zn = rng.uniform(-0.6, 0.6, 2)
        zd = distort(zn, dist)
        back = undistort(zd, dist)
        assert np.abs(back - zn).max() < 1e-10


def test_transform_identity_and_translation():
    c = plain_calib()
    q = so3.quat_identity()
    assert np.allclose(transform_to_camera(q, np.zeros(3), c, [0, 0, 1.0]), [0, 0, 1.0])
    assert np.allclose(transform_to_camera(q, np.array([1.0, 0, 0]), c, [1.0, 0, 1.0]), [0, 0, 1.0])


def test_transform_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = CalibrationState(
            extrinsic_rotation=so3.quat_normalize(rng.standard_normal(4)),
            extrinsic_translation=rng.standard_normal(3),
            intrinsics=np.array([450.0, 450.0, 320, 240, 0, 0, 0, 0]),
        )
        q = so3.quat_normalize(rng.standard_normal(4))
        p = rng.standard_normal(3)
        f = rng.standard_normal(3)
        pc = transform_to_camera(q, p, c, f)
        # invert
        R_GI = so3.quat_to_rot(q)
        R_CI = so3.quat_to_rot(c.extrinsic_rotation)
        back = R_GI.T @ (R_CI.T @ (pc - c.extrinsic_translation)) + p
        assert np.abs(back - f).max() < 1e-12


def look_at_pose(cam_pos, target):
    """IMU pose (identity extrinsics) whose +z camera axis points at target."""
    z = np.asarray(target, dtype=float) - cam_pos
    z = z / np.linalg.norm(z)
    x = np.cross([0.0, 0.0, 1.0], z)
    if np.linalg.norm(x) < 1e-8:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_GC = np.vstack([x, y, z])  # rows are camera axes in global frame
    return so3.rot_to_quat(R_GC), np.asarray(cam_pos, dtype=float)


def test_triangulate_two_views_exact():
    c = plain_calib(fx=400, fy=400, cx=320, cy=240)
    f = np.array([0.1, -0.05, 2.0])
    poses = [look_at_pose([0.0, 0, 0], [0, 0, 2.0]), look_at_pose([0.5, 0, 0], [0, 0, 2.0])]
    obs = []
    for k, (q, p) in enumerate(poses):
        uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
        obs.append(BearingObservation(0, 1, float(k), uv))
    p_hat, diag = triangulate(obs, poses, c)
    assert np.abs(p_hat - f).max() < 1e-9
    assert diag["depth"] > 0


def test_triangulate_zero_baseline_rejected():
    c = plain_calib(fx=400, fy=400, cx=320, cy=240)
    f = np.array([0.0, 0.0, 2.0])
    q, p = look_at_pose([0.0, 0, 0], [0, 0, 2.0])
    uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
    obs = [BearingObservation(0, 1, 0.0, uv), BearingObservation(0, 1, 1.0, uv)]
    with pytest.raises(TriangulationError):
        triangulate(obs, [(q, p), (q, p)], c)


def test_triangulate_noise_bound_vs_crlb():
    # 1 px noise, 10 views: error below 3x the linearized CRLB on 100 trials
    rng = np.random.default_rng(2)
    c = plain_calib(fx=400, fy=400, cx=320, cy=240)
    f = np.array([0.2, 0.1, 3.0])
    poses = [look_at_pose([0.8 * math.cos(a), 0.8 * math.sin(a), 0.0], f)
             for a in np.linspace(0, 2 * math.pi, 10, endpoint=False)]
    # CRLB from the stacked normalized-coordinate Jacobian
    J_rows = []
    for q, p in poses:
        R_GC, p_CinG = camera_pose(q, p, c)
        pc = R_GC @ (f - p_CinG)
        Jp = (np.array([[1, 0, -pc[0] / pc[2]], [0, 1, -pc[1] / pc[2]]]) / pc[2]) @ R_GC
        J_rows.append(Jp * 400.0)  # pixels per meter
    J = np.vstack(J_rows)
    crlb = np.linalg.inv(J.T @ J)  # sigma=1 px
    bound = 3.0 * math.sqrt(np.trace(crlb))
    fails = 0
    for _ in range(100):
        obs = []
        for k, (q, p) in enumerate(poses):
            uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
            obs.append(BearingObservation(0, 1, float(k), uv + rng.standard_normal(2)))
        p_hat, _ = triangulate(obs, poses, c)
        if np.linalg.norm(p_hat - f) > bound:
            fails += 1
    assert fails <= 5  # 3-sigma bound, allow rare excursions


def test_triangulate_rigid_transform_invariance():
    rng = np.random.default_rng(3)
    c = plain_calib(fx=400, fy=400, cx=320, cy=240)
    f = np.array([0.3, -0.2, 2.5])
    poses = [look_at_pose([0.6 * math.cos(a), 0.6 * math.sin(a), 0.1 * a], f)
             for a in np.linspace(0, 1.5, 5)]
    obs = []
    for k, (q, p) in enumerate(poses):
        uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
        obs.append(BearingObservation(0, 1, float(k), uv))
    p1, _ = triangulate(obs, poses, c)
    # apply a global rigid transform to all poses and the point
    R_W = so3.so3_exp(rng.uniform(-1, 1, 3))
    t_W = rng.uniform(-5, 5, 3)
    poses2 = []
    for q, p in poses:
        R_GI = so3.quat_to_rot(q)
        poses2.append((so3.rot_to_quat(R_GI @ R_W.T), R_W @ p + t_W))
    p2, _ = triangulate(obs, poses2, c)
    assert np.abs(p2 - (R_W @ p1 + t_W)).max() < 1e-9


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(500):
        c = CalibrationState(
            extrinsic_rotation=so3.quat_from_rotvec(0.1 * rng.standard_normal(3)),
            extrinsic_translation=0.05 * rng.standard_normal(3),
            intrinsics=np.array([400.0, 420.0, 320.0, 240.0, *rng.uniform(-0.05, 0.05, 4)]),
        )
        f = np.array([0, 0, 3.0]) + rng.uniform(-0.8, 0.8, 3)
        q, p = look_at_pose(rng.uniform(-0.3, 0.3, 3), f + rng.uniform(-0.2, 0.2, 3))
        try:
            uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
        except ProjectionError:
            continue
        res, H_pose, H_f, H_cal = measurement_jacobians(q, p, c, f, uv, with_calib=True)
        eps = 1e-6

        def pred(q_, p_, c_, f_):
            return project(transform_to_camera(q_, p_, c_, f_), c_.intrinsics)

        fd_f = np.zeros((2, 3))
        for j in range(3):
            df = np.zeros(3)
            df[j] = eps
            fd_f[:, j] = (pred(q, p, c, f + df) - pred(q, p, c, f - df)) / (2 * eps)
        worst = max(worst, np.abs(H_f - fd_f).max())

        fd_pose = np.zeros((2, 6))
        for j in range(6):
            dx = np.zeros(6)
            dx[j] = eps
            qp_, qm_ = so3.quat_boxplus(q, dx[:3]), so3.quat_boxplus(q, -dx[:3])
            fd_pose[:, j] = (pred(qp_, p + dx[3:], c, f) - pred(qm_, p - dx[3:], c, f)) / (2 * eps)
        worst = max(worst, np.abs(H_pose - fd_pose).max())

        def calib_plus(j, sign):
            c2 = c.copy()
            if 1 <= j <= 3:
                dth = np.zeros(3)
                dth[j - 1] = sign * eps
                c2.extrinsic_rotation = so3.quat_boxplus(c.extrinsic_rotation, dth)
            elif 4 <= j <= 6:
                c2.extrinsic_translation = c.extrinsic_translation.copy()
                c2.extrinsic_translation[j - 4] += sign * eps
            else:
                c2.intrinsics = c.intrinsics.copy()
                c2.intrinsics[j - 7] += sign * eps
            return c2

        fd_cal = np.zeros((2, 15))
        for j in range(1, 15):  # time-offset column not exercised
            fd_cal[:, j] = (pred(q, p, calib_plus(j, 1), f) - pred(q, p, calib_plus(j, -1), f)) / (2 * eps)
        worst = max(worst, np.abs(H_cal - fd_cal).max())
    assert worst < 1e-4


def test_depth_perturbation_on_axis_zero_pixel_change():
    # moving an on-axis point along the ray changes nothing to first order
    c = plain_calib(fx=400, fy=400)
    q, p = so3.quat_identity(), np.zeros(3)
    f = np.array([0.0, 0.0, 2.0])
    uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
    _, _, H_f, _ = measurement_jacobians(q, p, c, f, uv)
    assert np.abs(H_f @ np.array([0.0, 0.0, 1.0])).max() < 1e-12


def test_position_jacobian_chain_rule_identity():
    # position columns equal -(d pixel / d p_C) @ R_CI @ R_GI, i.e. -H_f
    rng = np.random.default_rng(5)
    for _ in range(50):
        c = CalibrationState(
            extrinsic_rotation=so3.quat_from_rotvec(0.2 * rng.standard_normal(3)),
            extrinsic_translation=0.1 * rng.standard_normal(3),
            intrinsics=np.array([400.0, 400.0, 320.0, 240.0, *rng.uniform(-0.03, 0.03, 4)]),
        )
        f = np.array([0, 0, 2.5]) + rng.uniform(-0.5, 0.5, 3)
        q, p = look_at_pose(rng.uniform(-0.2, 0.2, 3), f)
        uv = project(transform_to_camera(q, p, c, f), c.intrinsics)
        _, H_pose, H_f, _ = measurement_jacobians(q, p, c, f, uv)
        assert np.abs(H_pose[:, 3:6] + H_f).max() < 1e-12


def test_track_ordering_enforced():
    tr = FeatureTrack(5)
    tr.add(BearingObservation(0, 5, 0.0, [1.0, 2.0]))
    tr.add(BearingObservation(1, 5, 0.0, [1.0, 2.0]))  # other robot may share times
    with pytest.raises(ValueError):
        tr.add(BearingObservation(0, 5, 0.0, [1.0, 2.0]))
    with pytest.raises(ValueError):
        tr.add(BearingObservation(0, 6, 1.0, [1.0, 2.0]))


def test_pixel_to_normalized_round_trip():
    rng = np.random.default_rng(6)
    intr = np.array([430.0, 415.0, 321.0, 239.0, 0.05, -0.02, 0.001, -0.003])
    for _ in range(200):
        zn = rng.uniform(-0.5, 0.5, 2)
        uv = np.array([intr[0] * distort(zn, intr[4:])[0] + intr[2],
                       intr[1] * distort(zn, intr[4:])[1] + intr[3]])
        back = pixel_to_normalized(uv, intr)
        assert np.abs(back - zn).max() < 1e-10
