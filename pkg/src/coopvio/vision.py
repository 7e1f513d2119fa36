"""Camera measurement model: projection, radial-tangential distortion,
triangulation, and analytic measurement Jacobians.

A landmark in the global frame maps into a camera through

    p_C = R_CI @ R_GI @ (p_G - p_I) + p_CinI_cam

then perspective division, 4-coefficient radial-tangential distortion, and the
pinhole intrinsics. Jacobians chain these stages analytically; every block is
validated against finite differences in the tests.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .state import CalibrationState

MIN_DEPTH = 0.05  # meters; points closer or behind the camera are rejected
TRIANG_DEPTH_RANGE = (0.1, 60.0)  # accepted anchor-camera depths
TRIANG_COND_MAX = 1e4  # condition gate on the stacked linear system


class ProjectionError(ValueError):
    """Point cannot be projected (at/behind the camera)."""


class TriangulationError(ValueError):
    """Feature geometry unusable (degenerate, out of range, diverged)."""


@dataclass
class BearingObservation:
    robot_id: int
    feature_id: int
    frame_timestamp: float
    uv: np.ndarray  # pixels
    noise_sigma: float = 1.0

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        if not np.isfinite(self.uv).all():
            raise ValueError("observation uv must be finite")
        if self.noise_sigma <= 0:
            raise ValueError("noise sigma must be positive")


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)

    def add(self, obs: BearingObservation):
        if obs.feature_id != self.feature_id:
            raise ValueError("observation feature id mismatch")
        for prev in reversed(self.observations):
            if prev.robot_id == obs.robot_id:
                if prev.frame_timestamp >= obs.frame_timestamp:
                    raise ValueError("track timestamps must be strictly increasing per robot")
                break
        self.observations.append(obs)

    def timestamps(self):
        return [o.frame_timestamp for o in self.observations]

    def __len__(self):
        return len(self.observations)


def distort(zn, dist):
    """Radial-tangential distortion of normalized coordinates (k1 k2 p1 p2)."""
    u, v = zn
    k1, k2, p1, p2 = dist
    r2 = u * u + v * v
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    return np.array(
        [
            u * d + 2.0 * p1 * u * v + p2 * (r2 + 2.0 * u * u),
            v * d + p1 * (r2 + 2.0 * v * v) + 2.0 * p2 * u * v,
        ]
    )


def distort_jacobian(zn, dist):
    """2x2 Jacobian of :func:`distort` w.r.t. the normalized coordinates."""
    u, v = zn
    k1, k2, p1, p2 = dist
    r2 = u * u + v * v
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    dd_du = 2.0 * u * (k1 + 2.0 * k2 * r2)
    dd_dv = 2.0 * v * (k1 + 2.0 * k2 * r2)
    return np.array(
        [
            [d + u * dd_du + 2.0 * p1 * v + 6.0 * p2 * u, u * dd_dv + 2.0 * p1 * u + 2.0 * p2 * v],
            [v * dd_du + 2.0 * p1 * u + 2.0 * p2 * v, d + v * dd_dv + 6.0 * p1 * v + 2.0 * p2 * u],
        ]
    )


def undistort(zd, dist, iters: int = 10, tol: float = 1e-12):
    """Invert the distortion map by Newton iteration on the 2x2 system."""
    zn = np.asarray(zd, dtype=float).copy()
    for _ in range(iters):
        err = distort(zn, dist) - zd
        if float(err @ err) < tol * tol:
            break
        zn = zn - np.linalg.solve(distort_jacobian(zn, dist), err)
    return zn


def project(point_camera, intrinsics) -> np.ndarray:
    """Full camera map: perspective, distortion, pixels. Rejects z <= MIN_DEPTH."""
    p = np.asarray(point_camera, dtype=float)
    if p[2] <= MIN_DEPTH:
        raise ProjectionError(f"point depth {p[2]:.4f} below minimum")
    fx, fy, cx, cy = intrinsics[:4]
    zn = p[:2] / p[2]
    zd = distort(zn, intrinsics[4:8])
    return np.array([fx * zd[0] + cx, fy * zd[1] + cy])


def pixel_to_normalized(uv, intrinsics) -> np.ndarray:
    fx, fy, cx, cy = intrinsics[:4]
    zd = np.array([(uv[0] - cx) / fx, (uv[1] - cy) / fy])
    return undistort(zd, intrinsics[4:8])


def transform_to_camera(orientation, position, calib: CalibrationState, feature_global):
    """p_C = R_CI @ R_GI @ (p_G - p_I) + p_IinC for a pose (global->IMU, IMU pos)."""
    R_GI = so3.quat_to_rot(orientation)
    R_CI = so3.quat_to_rot(calib.extrinsic_rotation)
    return R_CI @ (R_GI @ (np.asarray(feature_global) - position)) + calib.extrinsic_translation


def camera_pose(orientation, position, calib: CalibrationState):
    """(R_GtoC, p_CinG) of the camera attached to an IMU pose."""
    R_GI = so3.quat_to_rot(orientation)
    R_CI = so3.quat_to_rot(calib.extrinsic_rotation)
    R_GC = R_CI @ R_GI
    # p_C = R_GC (p_G - p_CinG) with p_CinG = p_I - R_GI^T R_CI^T p_IinC... derive:
    # p_C = R_CI R_GI (p_G - p_I) + p_IinC = R_GC p_G - (R_GC p_I - p_IinC)
    p_CinG = position - R_GC.T @ calib.extrinsic_translation
    return R_GC, p_CinG


def triangulate(observations, poses, calib: CalibrationState, max_gn_iters: int = 5):
    """Linear least-squares triangulation + 3D Gauss-Newton refinement.

    ``poses`` is a list of (orientation, position) IMU poses matching the
    observations. Returns (p_global, diagnostics dict). Raises
    TriangulationError on degenerate geometry, bad depth, or divergence.
    """
    if len(observations) < 2 or len(observations) != len(poses):
        raise TriangulationError("need >= 2 observations with matching poses")
    n = len(observations)
    R_all = np.empty((n, 3, 3))
    c_all = np.empty((n, 3))
    zn_all = np.empty((n, 2))
    for i, (obs, (q, p)) in enumerate(zip(observations, poses)):
        zn_all[i] = pixel_to_normalized(obs.uv, calib.intrinsics)
        R_all[i], c_all[i] = camera_pose(q, p, calib)
    # two independent rows of skew([u, v, 1]) @ R per view
    A = np.empty((2 * n, 3))
    A[0::2] = -R_all[:, 1, :] + zn_all[:, 1:2] * R_all[:, 2, :]
    A[1::2] = R_all[:, 0, :] - zn_all[:, 0:1] * R_all[:, 2, :]
    b = np.einsum("ij,ij->i", A, np.repeat(c_all, 2, axis=0))
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > TRIANG_COND_MAX:
        raise TriangulationError(f"ill-conditioned system (cond {sv[0] / max(sv[-1], 1e-300):.2e})")
    p_f, *_ = np.linalg.lstsq(A, b, rcond=None)

    # Gauss-Newton on the reprojection residual in normalized coordinates
    converged = False
    r = np.zeros(1)
    for _ in range(max_gn_iters):
        pc = np.einsum("nij,nj->ni", R_all, p_f - c_all)
        if (pc[:, 2] <= MIN_DEPTH).any():
            raise TriangulationError("refined point behind a camera")
        pred = pc[:, :2] / pc[:, 2:3]
        r = (pred - zn_all).ravel()
        inv_z = 1.0 / pc[:, 2]
        Jn = np.empty((n, 2, 3))
        Jn[:, 0, 0] = inv_z
        Jn[:, 0, 1] = 0.0
        Jn[:, 0, 2] = -pc[:, 0] * inv_z * inv_z
        Jn[:, 1, 0] = 0.0
        Jn[:, 1, 1] = inv_z
        Jn[:, 1, 2] = -pc[:, 1] * inv_z * inv_z
        J = (Jn @ R_all).reshape(2 * n, 3)
        try:
            delta = np.linalg.solve(J.T @ J + 1e-12 * np.eye(3), -(J.T @ r))
        except np.linalg.LinAlgError as exc:
            raise TriangulationError("normal equations singular") from exc
        p_f = p_f + delta
        if np.linalg.norm(delta) < 1e-10:
            converged = True
            break
    if not converged and np.linalg.norm(delta) > 1e-6:
        raise TriangulationError("Gauss-Newton did not converge")

    # depth gate in the first (anchor) camera
    depth = float((R_all[0] @ (p_f - c_all[0]))[2])
    if not (TRIANG_DEPTH_RANGE[0] <= depth <= TRIANG_DEPTH_RANGE[1]):
        raise TriangulationError(f"depth {depth:.3f} outside accepted range")
    return p_f, {"condition": sv[0] / sv[-1], "depth": depth, "residual": float(r @ r)}


def measurement_jacobians(orientation, position, calib: CalibrationState, feature_global,
                          measured_uv, lin_orientation=None, lin_position=None,
                          lin_feature=None, with_calib: bool = False):
    """Residual and Jacobian blocks for one observation from one pose.

    Returns (residual(2), H_pose(2x6 for [dtheta, dpos]), H_f(2x3 global),
    H_calib(2x15) or None). Linearization points for the pose and the feature
    may be overridden (first-estimate evaluation); the residual always uses
    the current estimates.
    """
    p_G = np.asarray(feature_global, dtype=float)
    p_C = transform_to_camera(orientation, position, calib, p_G)
    predicted = project(p_C, calib.intrinsics)
    residual = np.asarray(measured_uv, dtype=float) - predicted

    q_lin = orientation if lin_orientation is None else lin_orientation
    p_lin = position if lin_position is None else np.asarray(lin_position, dtype=float)
    f_lin = p_G if lin_feature is None else np.asarray(lin_feature, dtype=float)
    R_GI = so3.quat_to_rot(q_lin)
    R_CI = so3.quat_to_rot(calib.extrinsic_rotation)
    p_C_lin = R_CI @ (R_GI @ (f_lin - p_lin)) + calib.extrinsic_translation
    z_lin = max(p_C_lin[2], MIN_DEPTH)

    fx, fy = calib.intrinsics[0], calib.intrinsics[1]
    zn_lin = p_C_lin[:2] / z_lin
    J_pix = np.diag([fx, fy]) @ distort_jacobian(zn_lin, calib.intrinsics[4:8])
    J_norm = (
        np.array([[1.0, 0.0, -p_C_lin[0] / z_lin], [0.0, 1.0, -p_C_lin[1] / z_lin]]) / z_lin
    )
    J_cam = J_pix @ J_norm  # d(pixel)/d(p_C)

    H_f = J_cam @ (R_CI @ R_GI)
    H_pose = np.zeros((2, 6))
    H_pose[:, 0:3] = J_cam @ R_CI @ so3.skew(R_GI @ (f_lin - p_lin))
    H_pose[:, 3:6] = -H_f

    H_calib = None
    if with_calib:
        H_calib = np.zeros((2, 15))
        # time offset column left zero: observations are timestamp-aligned here
        H_calib[:, 1:4] = J_cam @ so3.skew(R_CI @ (R_GI @ (f_lin - p_lin)))
        H_calib[:, 4:7] = J_cam
        # intrinsics: fx fy cx cy then distortion coefficients
        zd = distort(zn_lin, calib.intrinsics[4:8])
        H_calib[:, 7] = [zd[0], 0.0]
        H_calib[:, 8] = [0.0, zd[1]]
        H_calib[:, 9] = [1.0, 0.0]
        H_calib[:, 10] = [0.0, 1.0]
        u, v = zn_lin
        r2 = u * u + v * v
        dz_dk = np.array(
            [
                [u * r2, u * r2 * r2, 2.0 * u * v, r2 + 2.0 * u * u],
                [v * r2, v * r2 * r2, r2 + 2.0 * v * v, 2.0 * u * v],
            ]
        )
        H_calib[:, 11:15] = np.diag([fx, fy]) @ dz_dk
    return residual, H_pose, H_f, H_calib
