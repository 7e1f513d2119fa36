"""Rotation algebra on SO(3): unit quaternions, rotation matrices, small-angle tools.

Conventions (fixed here, everything else follows):
  * Quaternions are arrays ``[x, y, z, w]`` in the frame-rotation (JPL) convention:
    ``quat_to_rot(quat_multiply(q1, q2)) == quat_to_rot(q1) @ quat_to_rot(q2)``.
  * ``quat_to_rot(q)`` is the matrix that maps global-frame vectors into the local
    frame parameterized by ``q`` (e.g. global -> IMU).
  * The error state is local and left-multiplicative: for a small ``dth``,
    ``quat_to_rot(quat_boxplus(q, dth)) ~= (I - skew(dth)) @ quat_to_rot(q)``.
All Jacobian signs elsewhere in the package derive from these three rules.
"""

import math

import numpy as np

# Below this angle the exp/log/Jacobian series switch to second-order Taylor.
SMALL_ANGLE = 1e-7


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_multiply(q, p) -> np.ndarray:
    """Frame-rotation product: composition order matches rotation matrices."""
    qx, qy, qz, qw = q
    px, py, pz, pw = p
    return quat_normalize(
        [
            qw * px + pw * qx - (qy * pz - qz * py),
            qw * py + pw * qy - (qz * px - qx * pz),
            qw * pz + pw * qz - (qx * py - qy * px),
            qw * pw - (qx * px + qy * py + qz * pz),
        ]
    )


def quat_inverse(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of ``q`` (maps global vectors into the local frame)."""
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy + wz), 2.0 * (xz - wy)],
            [2.0 * (xy - wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz + wx)],
            [2.0 * (xz + wy), 2.0 * (yz - wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def rot_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rot` up to sign (w >= 0 chosen)."""
    R = np.asarray(R)
    # Shepperd's method on the transposed (vector-rotation) matrix.
    T = R.T
    tr = T[0, 0] + T[1, 1] + T[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (T[2, 1] - T[1, 2]) / s
        y = (T[0, 2] - T[2, 0]) / s
        z = (T[1, 0] - T[0, 1]) / s
    elif T[0, 0] > T[1, 1] and T[0, 0] > T[2, 2]:
        s = math.sqrt(1.0 + T[0, 0] - T[1, 1] - T[2, 2]) * 2.0
        w = (T[2, 1] - T[1, 2]) / s
        x = 0.25 * s
        y = (T[0, 1] + T[1, 0]) / s
        z = (T[0, 2] + T[2, 0]) / s
    elif T[1, 1] > T[2, 2]:
        s = math.sqrt(1.0 + T[1, 1] - T[0, 0] - T[2, 2]) * 2.0
        w = (T[0, 2] - T[2, 0]) / s
        x = (T[0, 1] + T[1, 0]) / s
        y = 0.25 * s
        z = (T[1, 2] + T[2, 1]) / s
    else:
        s = math.sqrt(1.0 + T[2, 2] - T[0, 0] - T[1, 1]) * 2.0
        w = (T[1, 0] - T[0, 1]) / s
        x = (T[0, 2] + T[2, 0]) / s
        y = (T[1, 2] + T[2, 1]) / s
        z = 0.25 * s
    q = quat_normalize([x, y, z, w])
    return q if q[3] >= 0.0 else -q


def quat_from_rotvec(phi) -> np.ndarray:
    """Quaternion with ``quat_to_rot(q) == so3_exp(phi).T`` (local frame rotated by phi)."""
    phi = np.asarray(phi, dtype=float)
    a = math.sqrt(float(phi @ phi))
    if a < SMALL_ANGLE:
        return quat_normalize([0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2], 1.0])
    s = math.sin(0.5 * a) / a
    return np.array([phi[0] * s, phi[1] * s, phi[2] * s, math.cos(0.5 * a)])


def quat_boxplus(q, dtheta) -> np.ndarray:
    """Retract a local error vector onto the quaternion manifold (left-multiplied)."""
    return quat_multiply(quat_from_rotvec(np.asarray(dtheta, dtype=float)), q)


def quat_boxminus(q1, q0) -> np.ndarray:
    """Local error ``dtheta`` with ``q1 == quat_boxplus(q0, dtheta)``."""
    dq = quat_multiply(q1, quat_inverse(q0))
    if dq[3] < 0.0:
        dq = -dq
    v = dq[:3]
    n = math.sqrt(float(v @ v))
    if n < 1e-14:
        return 2.0 * v
    return v * (2.0 * math.atan2(n, dq[3]) / n)


def skew(v) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def unskew(M) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues formula, second-order Taylor below the small-angle threshold."""
    phi = np.asarray(phi, dtype=float)
    a = math.sqrt(float(phi @ phi))
    S = skew(phi)
    if a < SMALL_ANGLE:
        return np.eye(3) + S + 0.5 * (S @ S)
    return np.eye(3) + (math.sin(a) / a) * S + ((1.0 - math.cos(a)) / (a * a)) * (S @ S)


def so3_log(R) -> np.ndarray:
    """Rotation vector of R; inverse of :func:`so3_exp` for angles < pi."""
    R = np.asarray(R)
    c = 0.5 * (np.trace(R) - 1.0)
    c = min(1.0, max(-1.0, c))
    a = math.acos(c)
    if a < SMALL_ANGLE:
        return unskew(0.5 * (R - R.T))
    if math.pi - a < 1e-6:
        # near pi: axis from the dominant diagonal entry
        d = np.diag(R)
        k = int(np.argmax(d))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (d[k] + 1.0) * 0.5))
        for j in range(3):
            if j != k:
                axis[j] = R[k, j] / (2.0 * axis[k])
        axis /= np.linalg.norm(axis)
        # fix sign with the skew part
        v = unskew(0.5 * (R - R.T))
        if v @ axis < 0.0:
            axis = -axis
        return axis * a
    return unskew(R - R.T) * (0.5 * a / math.sin(a))


def so3_right_jacobian(phi) -> np.ndarray:
    """Jr with integral identity: int_0^1 so3_exp(-s*phi) ds = Jr(phi)."""
    phi = np.asarray(phi, dtype=float)
    a = math.sqrt(float(phi @ phi))
    S = skew(phi)
    if a < SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + (1.0 / 6.0) * (S @ S)
    a2 = a * a
    return (
        np.eye(3)
        - ((1.0 - math.cos(a)) / a2) * S
        + ((a - math.sin(a)) / (a2 * a)) * (S @ S)
    )


def rotation_angle_deg(R) -> float:
    """Magnitude of the rotation encoded by R, in degrees."""
    return math.degrees(np.linalg.norm(so3_log(R)))
