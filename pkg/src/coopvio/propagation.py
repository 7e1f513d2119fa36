"""Discrete IMU state and covariance propagation.

The mean is integrated per sample pair with an exact-rotation step (delta
quaternion from the averaged rate) and Simpson quadrature for velocity and
position; at 400 Hz this is indistinguishable from RK4 on smooth signals and
roughly 10x cheaper. The error-state transition is the closed-form 15x15 with
second-order gyro/accel coupling terms, validated against finite differences
of the mean integrator. Biases are modeled as driven random walks.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import so3
from .state import BA, BG, IMU_DOF, POS, TH, VEL, InertialState, RobotState, symmetrize


@dataclass
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray  # rad/s, body frame
    linear_acceleration: np.ndarray  # m/s^2, body frame (specific force)


@dataclass
class NoiseParams:
    gyro_white: float = 1.6968e-04  # rad/s/sqrt(Hz)
    gyro_walk: float = 1.9393e-05  # rad/s^2/sqrt(Hz)
    accel_white: float = 2.0e-3  # m/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)
    gravity_mag: float = 9.81  # m/s^2

    def __post_init__(self):
        for name in ("gyro_white", "gyro_walk", "accel_white", "accel_walk", "gravity_mag"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def _rot_t_apply(q, ax, ay, az):
    # R(q)^T @ a with scalar math (local -> global)
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return (
        (1.0 - 2.0 * (yy + zz)) * ax + 2.0 * (xy - wz) * ay + 2.0 * (xz + wy) * az,
        2.0 * (xy + wz) * ax + (1.0 - 2.0 * (xx + zz)) * ay + 2.0 * (yz - wx) * az,
        2.0 * (xz - wy) * ax + 2.0 * (yz + wx) * ay + (1.0 - 2.0 * (xx + yy)) * az,
    )


def _step(q, p, v, bg, ba, w0, a0, w1, a1, dt, grav):
    """One integration step on plain floats; returns (q, p, v) tuples."""
    wx = 0.5 * (w0[0] + w1[0]) - bg[0]
    wy = 0.5 * (w0[1] + w1[1]) - bg[1]
    wz = 0.5 * (w0[2] + w1[2]) - bg[2]
    a0x, a0y, a0z = a0[0] - ba[0], a0[1] - ba[1], a0[2] - ba[2]
    a1x, a1y, a1z = a1[0] - ba[0], a1[1] - ba[1], a1[2] - ba[2]

    ang = math.sqrt(wx * wx + wy * wy + wz * wz) * dt
    if ang > 1e-12:
        f = math.sin(0.5 * ang) / (ang / dt)
        c = math.cos(0.5 * ang)
        fh = math.sin(0.25 * ang) / (ang / dt)
        ch = math.cos(0.25 * ang)
    else:
        f, c = 0.5 * dt, 1.0
        fh, ch = 0.25 * dt, 1.0
    x, y, z, w = q

    def left_mul(dx_, dy_, dz_, dw_):
        nx = dw_ * x + dx_ * w - (dy_ * z - dz_ * y)
        ny = dw_ * y + dy_ * w - (dz_ * x - dx_ * z)
        nz = dw_ * z + dz_ * w - (dx_ * y - dy_ * x)
        nw = dw_ * w - (dx_ * x + dy_ * y + dz_ * z)
        n = 1.0 / math.sqrt(nx * nx + ny * ny + nz * nz + nw * nw)
        return (nx * n, ny * n, nz * n, nw * n)

    qn = left_mul(wx * f, wy * f, wz * f, c)
    qm = left_mul(wx * fh, wy * fh, wz * fh, ch)

    amx, amy, amz = 0.5 * (a0x + a1x), 0.5 * (a0y + a1y), 0.5 * (a0z + a1z)
    g0 = _rot_t_apply(q, a0x, a0y, a0z)
    gm = _rot_t_apply(qm, amx, amy, amz)
    g1 = _rot_t_apply(qn, a1x, a1y, a1z)
    gz = -grav

    accx = (g0[0] + 4.0 * gm[0] + g1[0]) / 6.0
    accy = (g0[1] + 4.0 * gm[1] + g1[1]) / 6.0
    accz = (g0[2] + 4.0 * gm[2] + g1[2]) / 6.0 + gz

    pn = (
        p[0] + v[0] * dt + 0.5 * dt * dt * ((g0[0] + 2.0 * gm[0]) / 3.0),
        p[1] + v[1] * dt + 0.5 * dt * dt * ((g0[1] + 2.0 * gm[1]) / 3.0),
        p[2] + v[2] * dt + 0.5 * dt * dt * ((g0[2] + 2.0 * gm[2]) / 3.0 + gz),
    )
    vn = (v[0] + accx * dt, v[1] + accy * dt, v[2] + accz * dt)
    return qn, pn, vn


def propagate_mean(
    state: InertialState, s0: ImuSample, s1: ImuSample, gravity_mag: float = 9.81
) -> InertialState:
    """Propagate the inertial mean across one sample interval; biases constant."""
    dt = s1.timestamp - s0.timestamp
    if dt <= 0:
        raise ValueError("IMU timestamps must be strictly increasing")
    q, p, v = _step(
        tuple(state.orientation),
        tuple(state.position),
        tuple(state.velocity),
        tuple(state.gyro_bias),
        tuple(state.accel_bias),
        tuple(s0.angular_velocity),
        tuple(s0.linear_acceleration),
        tuple(s1.angular_velocity),
        tuple(s1.linear_acceleration),
        dt,
        gravity_mag,
    )
    out = state.copy()
    out.orientation = np.array(q)
    out.position = np.array(p)
    out.velocity = np.array(v)
    return out


def build_phi_qd(state: InertialState, samples, noise: NoiseParams):
    """Closed-form error-state transition and discrete noise over >= 2 samples.

    Multi-sample input composes per-interval factors: Phi = Phi_n ... Phi_1 and
    Qd accumulated consistently. Qd per interval is G Qc G^T dt (first order).
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    Phi = np.eye(IMU_DOF)
    Qd = np.zeros((IMU_DOF, IMU_DOF))
    st = state.copy()
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        if dt <= 0:
            raise ValueError("IMU timestamps must be strictly increasing")
        phi_k, qd_k = _phi_qd_single(st, s0, s1, dt, noise)
        Phi = phi_k @ Phi
        Qd = phi_k @ Qd @ phi_k.T + qd_k
        st = propagate_mean(st, s0, s1, noise.gravity_mag)
    return Phi, symmetrize(Qd)


def _phi_qd_single(state: InertialState, s0: ImuSample, s1: ImuSample, dt, noise):
    wh = 0.5 * (s0.angular_velocity + s1.angular_velocity) - state.gyro_bias
    ah = 0.5 * (s0.linear_acceleration + s1.linear_acceleration) - state.accel_bias
    Rt = so3.quat_to_rot(state.orientation).T  # IMU -> global
    Sa = so3.skew(ah)
    Sw = so3.skew(wh)
    Swa = so3.skew(np.cross(wh, ah))
    dt2 = dt * dt

    Phi = np.eye(IMU_DOF)
    Phi[TH, TH] = so3.so3_exp(-wh * dt)
    Phi[TH, BG] = -dt * so3.so3_right_jacobian(wh * dt)
    Phi[POS, VEL] = dt * np.eye(3)
    Phi[VEL, TH] = -Rt @ (Sa * dt + 0.5 * Swa * dt2)
    Phi[POS, TH] = -Rt @ (0.5 * Sa * dt2 + (dt2 * dt / 6.0) * Swa)
    Phi[VEL, BA] = -Rt @ (np.eye(3) * dt + 0.5 * Sw * dt2)
    Phi[POS, BA] = -Rt @ (0.5 * np.eye(3) * dt2 + (dt2 * dt / 6.0) * Sw)
    Phi[VEL, BG] = 0.5 * (Rt @ Sa) * dt2
    Phi[POS, BG] = (dt2 * dt / 6.0) * (Rt @ Sa)

    # G Qc G^T dt with G at the interval start
    G = np.zeros((IMU_DOF, 12))
    G[TH, 0:3] = -np.eye(3)
    G[VEL, 3:6] = -Rt
    G[BG, 6:9] = np.eye(3)
    G[BA, 9:12] = np.eye(3)
    qc = np.repeat(
        [noise.gyro_white**2, noise.accel_white**2, noise.gyro_walk**2, noise.accel_walk**2], 3
    )
    Qd = (G * qc) @ G.T * dt
    return Phi, Qd


def propagate_covariance(cov: np.ndarray, phi: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Apply the inertial-block transition to a full robot covariance.

    Clones, features, and calibration propagate with identity; their cross
    blocks with the inertial state are multiplied by phi on the inertial side.
    """
    if phi.shape != (IMU_DOF, IMU_DOF) or qd.shape != (IMU_DOF, IMU_DOF):
        raise ValueError("phi/qd must be 15x15 (inertial error block)")
    n = cov.shape[0]
    if n < IMU_DOF:
        raise ValueError("covariance smaller than the inertial block")
    out = cov.copy()
    out[:IMU_DOF, :IMU_DOF] = phi @ cov[:IMU_DOF, :IMU_DOF] @ phi.T + qd
    if n > IMU_DOF:
        cross = phi @ cov[:IMU_DOF, IMU_DOF:]
        out[:IMU_DOF, IMU_DOF:] = cross
        out[IMU_DOF:, :IMU_DOF] = cross.T
    return symmetrize(out)


def propagate_window(state: RobotState, cov: np.ndarray, samples, noise: NoiseParams):
    """Drive mean + covariance across a sample list; one covariance apply at the end.

    Hot path: the per-interval transition blocks are built as numpy batches
    and composed in a tight loop. Because the continuous noise is isotropic
    per sensor and the noise-input matrix is orthonormal per block, the
    per-interval discrete noise is a constant diagonal.
    """
    if len(samples) < 2:
        return state, cov
    n = len(samples) - 1
    T = np.array([s.timestamp for s in samples])
    dts = np.diff(T)
    if (dts <= 0).any():
        raise ValueError("IMU timestamps must be strictly increasing")
    W = np.array([s.angular_velocity for s in samples])
    A = np.array([s.linear_acceleration for s in samples])

    imu = state.imu
    bg = imu.gyro_bias
    ba = imu.accel_bias
    # mean pass on scalar tuples, recording orientation at each interval start
    q = tuple(imu.orientation)
    p = tuple(imu.position)
    v = tuple(imu.velocity)
    quats = np.empty((n, 4))
    bgt = tuple(bg)
    bat = tuple(ba)
    grav = noise.gravity_mag
    for k in range(n):
        quats[k] = q
        q, p, v = _step(q, p, v, bgt, bat, tuple(W[k]), tuple(A[k]),
                        tuple(W[k + 1]), tuple(A[k + 1]), dts[k], grav)

    # batched transition blocks (same closed form as _phi_qd_single)
    wh = 0.5 * (W[:-1] + W[1:]) - bg
    ah = 0.5 * (A[:-1] + A[1:]) - ba
    Rt = _batch_quat_to_rot_t(quats)  # (n,3,3) IMU->global at interval starts
    Sa = _batch_skew(ah)
    Sw = _batch_skew(wh)
    Swa = _batch_skew(np.cross(wh, ah))
    E = _batch_so3_exp(-wh * dts[:, None])
    Jr = _batch_right_jacobian(wh * dts[:, None])
    dt1 = dts[:, None, None]
    dt2 = dt1 * dt1
    dt3 = dt2 * dt1
    I3 = np.eye(3)
    RtSa = Rt @ Sa

    Phis = np.zeros((n, IMU_DOF, IMU_DOF))
    Phis[:] = np.eye(IMU_DOF)
    Phis[:, TH, TH] = E
    Phis[:, TH, BG] = -dt1 * Jr
    Phis[:, POS, VEL] = dt1 * I3
    Phis[:, VEL, TH] = -(RtSa * dt1 + 0.5 * (Rt @ Swa) * dt2)
    Phis[:, POS, TH] = -(0.5 * RtSa * dt2 + (Rt @ Swa) * dt3 / 6.0)
    Phis[:, VEL, BA] = -(Rt * dt1 + 0.5 * (Rt @ Sw) * dt2)
    Phis[:, POS, BA] = -(0.5 * Rt * dt2 + (Rt @ Sw) * dt3 / 6.0)
    Phis[:, VEL, BG] = 0.5 * RtSa * dt2
    Phis[:, POS, BG] = RtSa * dt3 / 6.0

    qdiag = np.zeros(IMU_DOF)
    Phi = np.eye(IMU_DOF)
    Qd = np.zeros((IMU_DOF, IMU_DOF))
    tmp = np.empty((IMU_DOF, IMU_DOF))
    for k in range(n):
        phi_k = Phis[k]
        np.matmul(phi_k, Phi, out=tmp)
        Phi, tmp = tmp, Phi
        Qd = phi_k @ Qd @ phi_k.T
        dtk = dts[k]
        qdiag[0:3] = noise.gyro_white**2 * dtk
        qdiag[6:9] = noise.accel_white**2 * dtk
        qdiag[9:12] = noise.gyro_walk**2 * dtk
        qdiag[12:15] = noise.accel_walk**2 * dtk
        Qd[np.arange(IMU_DOF), np.arange(IMU_DOF)] += qdiag

    out = state.copy()
    out.imu = InertialState(np.array(q), np.array(p), np.array(v), bg.copy(), ba.copy())
    out.timestamp = samples[-1].timestamp
    return out, propagate_covariance(cov, Phi, symmetrize(Qd))


def _batch_skew(v):
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _batch_quat_to_rot_t(q):
    """R(q)^T for an (n,4) array of quaternions."""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    n = q.shape[0]
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (yy + zz)
    R[:, 1, 0] = 2 * (xy + wz)
    R[:, 2, 0] = 2 * (xz - wy)
    R[:, 0, 1] = 2 * (xy - wz)
    R[:, 1, 1] = 1 - 2 * (xx + zz)
    R[:, 2, 1] = 2 * (yz + wx)
    R[:, 0, 2] = 2 * (xz + wy)
    R[:, 1, 2] = 2 * (yz - wx)
    R[:, 2, 2] = 1 - 2 * (xx + yy)
    return R


def _batch_so3_exp(phi):
    a = np.linalg.norm(phi, axis=1)
    S = _batch_skew(phi)
    S2 = S @ S
    small = a < 1e-7
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0, np.sin(a) / np.where(small, 1.0, a))
        c2 = np.where(small, 0.5, (1.0 - np.cos(a)) / np.where(small, 1.0, a * a))
    return np.eye(3) + c1[:, None, None] * S + c2[:, None, None] * S2


def _batch_right_jacobian(phi):
    a = np.linalg.norm(phi, axis=1)
    S = _batch_skew(phi)
    S2 = S @ S
    small = a < 1e-7
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 0.5, (1.0 - np.cos(a)) / np.where(small, 1.0, a * a))
        c2 = np.where(small, 1.0 / 6.0, (a - np.sin(a)) / np.where(small, 1.0, a**3))
    return np.eye(3) - c1[:, None, None] * S + c2[:, None, None] * S2


def imu_stream_to_csv(samples, path):
    """Write samples as ``t, wx, wy, wz, ax, ay, az`` rows."""
    with open(path, "w") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            w, a = s.angular_velocity, s.linear_acceleration
            f.write(
                f"{s.timestamp:.9f},{w[0]:.12g},{w[1]:.12g},{w[2]:.12g},"
                f"{a[0]:.12g},{a[1]:.12g},{a[2]:.12g}\n"
            )


def imu_stream_from_csv(path):
    samples = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("t,"):
            raise ValueError("bad IMU csv header")
        for line in f:
            parts = [float(x) for x in line.strip().split(",")]
            samples.append(ImuSample(parts[0], np.array(parts[1:4]), np.array(parts[4:7])))
    for a, b in zip(samples[:-1], samples[1:]):
        if b.timestamp <= a.timestamp:
            raise ValueError("IMU csv timestamps not strictly increasing")
    return samples
