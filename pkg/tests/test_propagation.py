import math

import numpy as np
import pytest

from coopvio import so3
from coopvio.propagation import (
    ImuSample,
    NoiseParams,
    build_phi_qd,
    imu_stream_from_csv,
    imu_stream_to_csv,
    propagate_covariance,
    propagate_mean,
    propagate_window,
)
from coopvio.state import InertialState

G = 9.81


def stationary_samples(state, t0, dt, n):
    """Measurements consistent with a motionless IMU at the given state."""
    R = so3.quat_to_rot(state.orientation)
    a_m = state.accel_bias + R @ np.array([0.0, 0.0, G])
    w_m = state.gyro_bias.copy()
    return [ImuSample(t0 + k * dt, w_m.copy(), a_m.copy()) for k in range(n)]


def test_stationary_equilibrium():
    rng = np.random.default_rng(0)
    st = InertialState(
        orientation=so3.quat_normalize(rng.standard_normal(4)),
        position=rng.standard_normal(3),
        velocity=np.zeros(3),
        gyro_bias=0.01 * rng.standard_normal(3),
        accel_bias=0.05 * rng.standard_normal(3),
    )
    samples = stationary_samples(st, 0.0, 1 / 400.0, 400)
    cur = st
    for s0, s1 in zip(samples[:-1], samples[1:]):
        cur = propagate_mean(cur, s0, s1)
    assert np.linalg.norm(cur.position - st.position) < 1e-12
    assert np.linalg.norm(cur.velocity) < 1e-12
    assert np.abs(so3.quat_boxminus(cur.orientation, st.orientation)).max() < 1e-12


def test_constant_yaw_rate_heading_advance():
    w = 0.7
    st = InertialState()
    dt = 1 / 400.0
    cur = st
    for k in range(400):
        # gravity-compensating specific force in the rotating frame at each step
        R0 = so3.quat_to_rot(cur.orientation)
        R1 = so3.so3_exp(-np.array([0, 0, w]) * dt) @ R0
        s0 = ImuSample(k * dt, np.array([0, 0, w]), R0 @ np.array([0, 0, G]))
        s1 = ImuSample((k + 1) * dt, np.array([0, 0, w]), R1 @ np.array([0, 0, G]))
        cur = propagate_mean(cur, s0, s1)
    dth = so3.quat_boxminus(cur.orientation, st.orientation)
    assert abs(abs(dth[2]) - w * 1.0) < 1e-8
    assert np.linalg.norm(cur.position) < 1e-9


def test_free_fall_ballistic():
    st = InertialState(velocity=np.array([1.0, -2.0, 0.5]))
    dt = 1 / 400.0
    n = 200
    samples = [ImuSample(k * dt, np.zeros(3), np.zeros(3)) for k in range(n + 1)]
    cur = st
    for s0, s1 in zip(samples[:-1], samples[1:]):
        cur = propagate_mean(cur, s0, s1)
    T = n * dt
    g = np.array([0, 0, -G])
    assert np.linalg.norm(cur.position - (st.velocity * T + 0.5 * g * T**2)) < 1e-10
    assert np.linalg.norm(cur.velocity - (st.velocity + g * T)) < 1e-12


def test_non_monotone_timestamps_rejected():
    st = InertialState()
    s0 = ImuSample(1.0, np.zeros(3), np.zeros(3))
    s1 = ImuSample(1.0, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        propagate_mean(st, s0, s1)


def test_noise_params_positive():
    with pytest.raises(ValueError):
        NoiseParams(gyro_white=0.0)


def _random_state(rng):
    return InertialState(
        orientation=so3.quat_normalize(rng.standard_normal(4)),
        position=rng.standard_normal(3),
        velocity=rng.standard_normal(3),
        gyro_bias=0.01 * rng.standard_normal(3),
        accel_bias=0.05 * rng.standard_normal(3),
    )


def _perturb(state, dx):
    out = state.copy()
    out.orientation = so3.quat_boxplus(state.orientation, dx[0:3])
    out.position = state.position + dx[3:6]
    out.velocity = state.velocity + dx[6:9]
    out.gyro_bias = state.gyro_bias + dx[9:12]
    out.accel_bias = state.accel_bias + dx[12:15]
    return out


def _error(s1, s0):
    return np.concatenate(
        [
            so3.quat_boxminus(s1.orientation, s0.orientation),
            s1.position - s0.position,
            s1.velocity - s0.velocity,
            s1.gyro_bias - s0.gyro_bias,
            s1.accel_bias - s0.accel_bias,
        ]
    )


def test_phi_matches_finite_differences():
    rng = np.random.default_rng(1)
    noise = NoiseParams()
    dt = 1 / 400.0
    worst = 0.0
    for _ in range(100):
        st = _random_state(rng)
        w0 = rng.uniform(-2, 2, 3)
        a0 = rng.uniform(-10, 10, 3)
        s0 = ImuSample(0.0, w0, a0)
        s1 = ImuSample(dt, w0 + rng.uniform(-0.05, 0.05, 3), a0 + rng.uniform(-0.1, 0.1, 3))
        phi, _ = build_phi_qd(st, [s0, s1], noise)
        base = propagate_mean(st, s0, s1)
        eps = 1e-6
        phi_fd = np.zeros((15, 15))
        for j in range(15):
            dx = np.zeros(15)
            dx[j] = eps
            out = propagate_mean(_perturb(st, dx), s0, s1)
            phi_fd[:, j] = _error(out, base) / eps
        worst = max(worst, np.abs(phi - phi_fd).max())
    assert worst < 1e-4


def test_phi_qd_zero_dt_limit():
    st = InertialState()
    noise = NoiseParams()
    dt = 1e-9
    s0 = ImuSample(0.0, np.array([0.1, 0.2, 0.3]), np.array([0.0, 0.0, 9.81]))
    s1 = ImuSample(dt, s0.angular_velocity, s0.linear_acceleration)
    phi, qd = build_phi_qd(st, [s0, s1], noise)
    assert np.abs(phi - np.eye(15)).max() < 1e-8
    assert np.abs(qd).max() < 1e-12


def test_phi_bias_orientation_coupling_nonzero():
    st = InertialState()
    noise = NoiseParams()
    dt = 1 / 100.0
    s0 = ImuSample(0.0, np.array([0.3, 0.0, 0.0]), np.array([0.0, 0.0, 9.81]))
    s1 = ImuSample(dt, s0.angular_velocity, s0.linear_acceleration)
    phi, _ = build_phi_qd(st, [s0, s1], noise)
    assert np.abs(phi[0:3, 9:12]).max() > 1e-4


def test_qd_psd_and_update_identity():
    rng = np.random.default_rng(2)
    noise = NoiseParams()
    st = _random_state(rng)
    dt = 1 / 400.0
    s0 = ImuSample(0.0, rng.uniform(-1, 1, 3), rng.uniform(-5, 5, 3))
    s1 = ImuSample(dt, s0.angular_velocity, s0.linear_acceleration)
    phi, qd = build_phi_qd(st, [s0, s1], noise)
    assert np.linalg.eigvalsh(qd).min() >= -1e-12
    P = np.eye(15) * 0.1
    P2 = propagate_covariance(P, phi, qd)
    assert np.abs(P2 - (phi @ P @ phi.T + qd)).max() < 1e-15


def test_propagate_covariance_identity_case():
    P = np.diag(np.arange(1.0, 22.0))
    out = propagate_covariance(P, np.eye(15), np.zeros((15, 15)))
    assert np.allclose(out, P)
    with pytest.raises(ValueError):
        propagate_covariance(P, np.eye(14), np.zeros((15, 15)))


def test_propagate_covariance_cross_blocks():
    rng = np.random.default_rng(3)
    n = 15 + 12
    A = rng.standard_normal((n, n))
    P = A @ A.T
    phi = np.eye(15) + 0.01 * rng.standard_normal((15, 15))
    qd = 1e-6 * np.eye(15)
    out = propagate_covariance(P, phi, qd)
    assert np.allclose(out[:15, 15:], phi @ P[:15, 15:])
    assert np.allclose(out[15:, 15:], 0.5 * (P[15:, 15:] + P[15:, 15:].T))


def test_monte_carlo_noise_consistency():
    # empirical covariance of one-step propagation error matches Qd within 10%
    rng = np.random.default_rng(4)
    noise = NoiseParams()
    st = _random_state(rng)
    dt = 1 / 400.0
    w_true = np.array([0.4, -0.2, 0.1])
    a_true = np.array([0.5, 0.2, 9.6])
    s0 = ImuSample(0.0, w_true + st.gyro_bias, a_true + st.accel_bias)
    s1 = ImuSample(dt, s0.angular_velocity, s0.linear_acceleration)
    phi, qd = build_phi_qd(st, [s0, s1], noise)
    base = propagate_mean(st, s0, s1)

    n_mc = 10000
    sg = noise.gyro_white / math.sqrt(dt)
    sa = noise.accel_white / math.sqrt(dt)
    swg = noise.gyro_walk * math.sqrt(dt)
    swa = noise.accel_walk * math.sqrt(dt)
    errs = np.zeros((n_mc, 15))
    for i in range(n_mc):
        ng = sg * rng.standard_normal(3)
        na = sa * rng.standard_normal(3)
        s0n = ImuSample(0.0, s0.angular_velocity + ng, s0.linear_acceleration + na)
        s1n = ImuSample(dt, s1.angular_velocity + ng, s1.linear_acceleration + na)
        noisy = propagate_mean(st, s0n, s1n)
        noisy.gyro_bias = st.gyro_bias + swg * rng.standard_normal(3)
        noisy.accel_bias = st.accel_bias + swa * rng.standard_normal(3)
        errs[i] = _error(noisy, base)
    emp = errs.T @ errs / n_mc
    num = np.linalg.norm(emp - qd)
    den = np.linalg.norm(qd)
    assert num / den < 0.10


def test_window_vs_stepwise_equivalence():
    from coopvio.state import CloneWindow, RobotState, SlamMap, CalibrationState, initial_covariance

    rng = np.random.default_rng(5)
    st = RobotState(0, _random_state(rng), CalibrationState(), CloneWindow(11), SlamMap(5))
    cov = initial_covariance(st)
    noise = NoiseParams()
    dt = 1 / 400.0
    samples = []
    for k in range(41):
        samples.append(ImuSample(k * dt, rng.uniform(-1, 1, 3), rng.uniform(-2, 2, 3) + [0, 0, 9.5]))
    out, cov_out = propagate_window(st, cov, samples, noise)
    # stepwise reference
    imu = st.imu
    cov_ref = cov
    for s0, s1 in zip(samples[:-1], samples[1:]):
        phi, qd = build_phi_qd(imu, [s0, s1], noise)
        cov_ref = propagate_covariance(cov_ref, phi, qd)
        imu = propagate_mean(imu, s0, s1)
    assert np.linalg.norm(_error(out.imu, imu)) < 1e-12
    assert np.abs(cov_out - cov_ref).max() < 1e-14


def test_imu_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    samples = [
        ImuSample(0.01 * k, rng.standard_normal(3), rng.standard_normal(3)) for k in range(10)
    ]
    path = tmp_path / "imu.csv"
    imu_stream_to_csv(samples, path)
    back = imu_stream_from_csv(path)
    for a, b in zip(samples, back):
        assert abs(a.timestamp - b.timestamp) < 1e-9
        assert np.abs(a.angular_velocity - b.angular_velocity).max() < 1e-10
        assert np.abs(a.linear_acceleration - b.linear_acceleration).max() < 1e-10
