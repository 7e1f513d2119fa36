"""Joint multi-robot estimator: the non-realtime baseline and correctness oracle.

All robot states live in one stacked error vector with the full cross-robot
covariance. Propagation is block-diagonal per robot; updates are standard
joint EKF over whichever blocks a measurement touches.
"""

import time

import numpy as np

from .propagation import IMU_DOF, NoiseParams, propagate_mean
from .state import (
    ErrorIndex,
    RobotState,
    apply_correction,
    augment_clone,
    init_slam_feature,
    marginalize_clone,
    remove_slam_feature,
    symmetrize,
)
from .updates import (
    FilterConfig,
    LinearizedSystem,
    RankError,
    UpdateResult,
    chi2_threshold,
    kalman_core,
)


class JointState:
    """Ordered collection of robot states sharing one covariance matrix."""

    def __init__(self, states):
        self.states: dict[int, RobotState] = {s.robot_id: s for s in states}
        self.order = sorted(self.states.keys())

    def offsets(self):
        out = {}
        off = 0
        for rid in self.order:
            out[rid] = off
            off += self.states[rid].error_dim()
        return out, off

    def error_dim(self) -> int:
        return sum(self.states[rid].error_dim() for rid in self.order)

    def copy(self) -> "JointState":
        return JointState([self.states[rid].copy() for rid in self.order])


def joint_initial_covariance(joint: JointState, per_robot_covs) -> np.ndarray:
    offs, dim = joint.offsets()
    P = np.zeros((dim, dim))
    for rid in joint.order:
        o = offs[rid]
        d = joint.states[rid].error_dim()
        P[o:o + d, o:o + d] = per_robot_covs[rid]
    return P


def assemble_joint_H(joint: JointState, sys: LinearizedSystem) -> np.ndarray:
    offs, dim = joint.offsets()
    H = np.zeros((sys.rows, dim))
    for rid, Hr in sys.blocks.items():
        o = offs[rid]
        H[:, o:o + Hr.shape[1]] = Hr
    return H


def centralized_update(joint: JointState, cov, sys: LinearizedSystem,
                       config: FilterConfig, gate: bool = True, kind: str = "joint"):
    """Standard EKF over the stacked state; mutates every touched block."""
    t0 = time.perf_counter()
    H = assemble_joint_H(joint, sys)
    try:
        dx, P_new, gamma = kalman_core(cov, H, sys.residual, sys.noise_cov, config.cond_max)
    except RankError as exc:
        return joint, cov, UpdateResult(False, kind, sys.rows, reason=str(exc))
    if gate and gamma > chi2_threshold(sys.rows, config.chi2_level):
        return joint, cov, UpdateResult(False, kind, sys.rows, chi2=gamma, reason="chi2")
    offs, _ = joint.offsets()
    new = joint.copy()
    for rid in joint.order:
        o = offs[rid]
        d = joint.states[rid].error_dim()
        new.states[rid] = apply_correction(joint.states[rid], dx[o:o + d])
    us = (time.perf_counter() - t0) * 1e6
    return new, P_new, UpdateResult(True, kind, sys.rows, chi2=gamma, runtime_us=us)


def joint_propagate(joint: JointState, cov, rid: int, samples, noise: NoiseParams):
    """Propagate one robot's inertial block inside the joint covariance."""
    from .propagation import build_phi_qd

    if len(samples) < 2:
        return joint, cov
    offs, dim = joint.offsets()
    o = offs[rid]
    st = joint.states[rid]
    phi, qd = build_phi_qd(st.imu, samples, noise)
    imu = st.imu
    for s0, s1 in zip(samples[:-1], samples[1:]):
        imu = propagate_mean(imu, s0, s1, noise.gravity_mag)
    new = joint.copy()
    new.states[rid].imu = imu
    new.states[rid].timestamp = samples[-1].timestamp
    # full-matrix transition: identity except this robot's 15x15 inertial block
    P = np.array(cov, copy=True)
    rows = slice(o, o + IMU_DOF)
    P_ri = phi @ P[rows, :]
    P[rows, :] = P_ri
    P[:, rows] = P_ri.T
    P[rows, rows] = phi @ cov[rows, rows] @ phi.T + qd
    return new, symmetrize(P)


def joint_augment_clone(joint: JointState, cov, rid: int, t: float):
    """Clone one robot's pose; new rows duplicate its pose rows globally."""
    offs, dim = joint.offsets()
    o = offs[rid]
    st = joint.states[rid]
    n_feat = 3 * len(st.slam)
    ins = o + st.error_dim() - n_feat  # global insertion point
    pose_rows = np.r_[o:o + 3, o + 3:o + 6]
    new = joint.copy()
    new_state, _ = augment_clone(st, np.zeros((st.error_dim(), st.error_dim())), t)
    new.states[rid] = new_state
    P = np.asarray(cov)
    out = np.zeros((dim + 6, dim + 6))
    out[:ins, :ins] = P[:ins, :ins]
    out[:ins, ins + 6:] = P[:ins, ins:]
    out[ins + 6:, :ins] = P[ins:, :ins]
    out[ins + 6:, ins + 6:] = P[ins:, ins:]
    out[ins:ins + 6, :ins] = P[pose_rows, :ins]
    out[ins:ins + 6, ins + 6:] = P[np.ix_(pose_rows, np.arange(ins, dim))]
    out[:ins, ins:ins + 6] = P[:ins, pose_rows]
    out[ins + 6:, ins:ins + 6] = P[np.ix_(np.arange(ins, dim), pose_rows)]
    out[ins:ins + 6, ins:ins + 6] = P[np.ix_(pose_rows, pose_rows)]
    return new, symmetrize(out)


def joint_marginalize_clone(joint: JointState, cov, rid: int, index: int):
    offs, dim = joint.offsets()
    o = offs[rid]
    st = joint.states[rid]
    idx = ErrorIndex(st)
    t = st.clones.clones[index].timestamp
    s = idx.clone(t)
    new = joint.copy()
    new_state, _ = marginalize_clone(st, np.zeros((st.error_dim(), st.error_dim())), index)
    new.states[rid] = new_state
    keep = np.r_[np.arange(0, o + s.start), np.arange(o + s.stop, dim)]
    return new, symmetrize(np.asarray(cov)[np.ix_(keep, keep)])


def joint_init_slam_feature(joint: JointState, cov, rid: int, feature_id: int,
                            position, prior_3x3, cross_global=None):
    """Append a landmark to one robot's map; cross terms span the whole joint state."""
    offs, dim = joint.offsets()
    o = offs[rid]
    st = joint.states[rid]
    ins = o + st.error_dim()  # features sit at the end of the robot's block
    new = joint.copy()
    new_state, _ = init_slam_feature(
        st, np.zeros((st.error_dim(), st.error_dim())), feature_id, position, prior_3x3
    )
    new.states[rid] = new_state
    P = np.asarray(cov)
    out = np.zeros((dim + 3, dim + 3))
    out[:ins, :ins] = P[:ins, :ins]
    out[:ins, ins + 3:] = P[:ins, ins:]
    out[ins + 3:, :ins] = P[ins:, :ins]
    out[ins + 3:, ins + 3:] = P[ins:, ins:]
    out[ins:ins + 3, ins:ins + 3] = prior_3x3
    if cross_global is not None:
        c = np.asarray(cross_global)
        out[ins:ins + 3, :ins] = c[:, :ins]
        out[ins:ins + 3, ins + 3:] = c[:, ins:]
        out[:ins, ins:ins + 3] = c[:, :ins].T
        out[ins + 3:, ins:ins + 3] = c[:, ins:].T
    return new, symmetrize(out)


def joint_remove_slam_feature(joint: JointState, cov, rid: int, feature_id: int):
    offs, dim = joint.offsets()
    o = offs[rid]
    st = joint.states[rid]
    idx = ErrorIndex(st)
    s = idx.feat(feature_id)
    new = joint.copy()
    new_state, _ = remove_slam_feature(st, np.zeros((st.error_dim(), st.error_dim())),
                                       feature_id)
    new.states[rid] = new_state
    keep = np.r_[np.arange(0, o + s.start), np.arange(o + s.stop, dim)]
    return new, symmetrize(np.asarray(cov)[np.ix_(keep, keep)])
