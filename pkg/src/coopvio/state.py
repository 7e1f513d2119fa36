"""Robot state vector, error-state indexing, clone and SLAM-feature bookkeeping.

A robot estimates an inertial state, optional sensor calibration, a sliding
window of pose clones, and a small map of long-lived landmark positions. The
error state is ordered

    [ theta(3) p(3) v(3) bg(3) ba(3) | calib(15, optional) | clones(6 each) | feats(3 each) ]

with clones sorted by timestamp and features in insertion order. Landmark
entries keep the estimate at initialization frozen (``first_estimate``) so
update Jacobians can be evaluated at a fixed linearization point.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3

IMU_DOF = 15
CALIB_DOF = 15  # 1 time offset + 3 extrinsic rot + 3 extrinsic trans + 8 intrinsics
CLONE_DOF = 6
FEAT_DOF = 3

# inertial sub-slices
TH = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


@dataclass
class InertialState:
    orientation: np.ndarray = field(default_factory=so3.quat_identity)  # global -> IMU
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "InertialState":
        return InertialState(
            self.orientation.copy(),
            self.position.copy(),
            self.velocity.copy(),
            self.gyro_bias.copy(),
            self.accel_bias.copy(),
        )


@dataclass
class CalibrationState:
    time_offset: float = 0.0  # camera clock minus IMU clock, seconds
    extrinsic_rotation: np.ndarray = field(default_factory=so3.quat_identity)  # IMU -> camera
    extrinsic_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # IMU in camera
    intrinsics: np.ndarray = field(
        default_factory=lambda: np.array([400.0, 400.0, 320.0, 240.0, 0.0, 0.0, 0.0, 0.0])
    )  # fx fy cx cy k1 k2 p1 p2

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float)
        if self.intrinsics[0] <= 0 or self.intrinsics[1] <= 0:
            raise ValueError("focal lengths must be positive")

    def copy(self) -> "CalibrationState":
        return CalibrationState(
            self.time_offset,
            self.extrinsic_rotation.copy(),
            self.extrinsic_translation.copy(),
            self.intrinsics.copy(),
        )


@dataclass
class Clone:
    timestamp: float
    orientation: np.ndarray  # global -> IMU at the clone time
    position: np.ndarray
    first_orientation: np.ndarray = None  # frozen at augmentation (optional FEJ anchor)
    first_position: np.ndarray = None

    def __post_init__(self):
        if self.first_orientation is None:
            self.first_orientation = self.orientation.copy()
        if self.first_position is None:
            self.first_position = self.position.copy()

    def copy(self) -> "Clone":
        return Clone(
            self.timestamp,
            self.orientation.copy(),
            self.position.copy(),
            self.first_orientation.copy(),
            self.first_position.copy(),
        )


class CloneWindow:
    """Sliding window of cloned poses, timestamps strictly increasing."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.clones: list[Clone] = []

    def __len__(self):
        return len(self.clones)

    def __iter__(self):
        return iter(self.clones)

    def timestamps(self):
        return [c.timestamp for c in self.clones]

    def index_of(self, timestamp: float, tol: float = 1e-9):
        for i, c in enumerate(self.clones):
            if abs(c.timestamp - timestamp) <= tol:
                return i
        return None

    def copy(self) -> "CloneWindow":
        w = CloneWindow(self.capacity)
        w.clones = [c.copy() for c in self.clones]
        return w


@dataclass
class SlamFeature:
    feature_id: int
    position: np.ndarray
    first_estimate: np.ndarray  # frozen linearization anchor

    def copy(self) -> "SlamFeature":
        return SlamFeature(self.feature_id, self.position.copy(), self.first_estimate.copy())


class SlamMap:
    """Landmarks kept in the state vector, bounded capacity, unique ids."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.features: list[SlamFeature] = []

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def ids(self):
        return [f.feature_id for f in self.features]

    def get(self, feature_id: int):
        for f in self.features:
            if f.feature_id == feature_id:
                return f
        return None

    def index_of(self, feature_id: int):
        for i, f in enumerate(self.features):
            if f.feature_id == feature_id:
                return i
        return None

    def copy(self) -> "SlamMap":
        m = SlamMap(self.capacity)
        m.features = [f.copy() for f in self.features]
        return m


@dataclass
class RobotState:
    robot_id: int
    imu: InertialState
    calib: CalibrationState
    clones: CloneWindow
    slam: SlamMap
    timestamp: float = 0.0
    estimate_calibration: bool = False

    def error_dim(self) -> int:
        d = IMU_DOF
        if self.estimate_calibration:
            d += CALIB_DOF
        return d + CLONE_DOF * len(self.clones) + FEAT_DOF * len(self.slam)

    def copy(self) -> "RobotState":
        return RobotState(
            self.robot_id,
            self.imu.copy(),
            self.calib.copy(),
            self.clones.copy(),
            self.slam.copy(),
            self.timestamp,
            self.estimate_calibration,
        )


class ErrorIndex:
    """Maps every sub-state to its contiguous slice of the error vector.

    Totality is checked on construction: the slices tile [0, dim) exactly.
    """

    def __init__(self, state: RobotState):
        off = 0
        self.theta = slice(0, 3)
        self.pos = slice(3, 6)
        self.vel = slice(6, 9)
        self.bg = slice(9, 12)
        self.ba = slice(12, 15)
        off = IMU_DOF
        self.calib = None
        if state.estimate_calibration:
            self.calib = slice(off, off + CALIB_DOF)
            off += CALIB_DOF
        self.clone_slices: dict[float, slice] = {}
        for c in state.clones:
            self.clone_slices[c.timestamp] = slice(off, off + CLONE_DOF)
            off += CLONE_DOF
        self.feat_slices: dict[int, slice] = {}
        for f in state.slam:
            self.feat_slices[f.feature_id] = slice(off, off + FEAT_DOF)
            off += FEAT_DOF
        self.dim = off
        assert self.dim == state.error_dim()

    def clone(self, timestamp: float) -> slice:
        return self.clone_slices[timestamp]

    def feat(self, feature_id: int) -> slice:
        return self.feat_slices[feature_id]


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def check_covariance(P: np.ndarray, tol_sym: float = 1e-9, tol_eig: float = -1e-9):
    """Spot-check symmetry and positive semi-definiteness; raises on violation."""
    if np.max(np.abs(P - P.T)) > tol_sym:
        raise ValueError("covariance not symmetric")
    w = np.linalg.eigvalsh(symmetrize(P))
    if w.min() < tol_eig * max(1.0, w.max()):
        raise ValueError(f"covariance not PSD (min eig {w.min():.3e})")


def augment_clone(state: RobotState, cov: np.ndarray, t: float):
    """Append the current IMU pose as a clone; covariance rows are exact copies.

    Rejects duplicate timestamps and a full window (callers marginalize first).
    """
    if len(state.clones) >= state.clones.capacity:
        raise ValueError("clone window full; marginalize before augmenting")
    if state.clones.index_of(t) is not None:
        raise ValueError(f"duplicate clone timestamp {t}")
    if state.clones.clones and t <= state.clones.clones[-1].timestamp:
        raise ValueError("clone timestamps must be strictly increasing")

    new_state = state.copy()
    new_state.clones.clones.append(
        Clone(t, state.imu.orientation.copy(), state.imu.position.copy())
    )

    idx_old = ErrorIndex(state)
    n = idx_old.dim
    # insertion point: after existing clones, before features
    n_feat = FEAT_DOF * len(state.slam)
    ins = n - n_feat

    pose_rows = np.r_[np.arange(3), np.arange(3, 6)]  # theta then pos of the IMU block
    P = np.asarray(cov)
    out = np.zeros((n + CLONE_DOF, n + CLONE_DOF))
    # old block
    out[:ins, :ins] = P[:ins, :ins]
    out[:ins, ins + CLONE_DOF:] = P[:ins, ins:]
    out[ins + CLONE_DOF:, :ins] = P[ins:, :ins]
    out[ins + CLONE_DOF:, ins + CLONE_DOF:] = P[ins:, ins:]
    # duplicated rows/cols
    out[ins:ins + CLONE_DOF, :ins] = P[pose_rows, :ins]
    out[ins:ins + CLONE_DOF, ins + CLONE_DOF:] = P[np.ix_(pose_rows, np.arange(ins, n))]
    out[:ins, ins:ins + CLONE_DOF] = P[:ins, pose_rows]
    out[ins + CLONE_DOF:, ins:ins + CLONE_DOF] = P[np.ix_(np.arange(ins, n), pose_rows)]
    out[ins:ins + CLONE_DOF, ins:ins + CLONE_DOF] = P[np.ix_(pose_rows, pose_rows)]
    return new_state, symmetrize(out)


def marginalize_clone(state: RobotState, cov: np.ndarray, index: int):
    """Drop a clone: remove its rows/cols (plain Gaussian marginalization)."""
    if index < 0 or index >= len(state.clones):
        raise IndexError(f"clone index {index} out of range")
    idx = ErrorIndex(state)
    t = state.clones.clones[index].timestamp
    s = idx.clone(t)
    new_state = state.copy()
    del new_state.clones.clones[index]
    keep = np.r_[np.arange(0, s.start), np.arange(s.stop, idx.dim)]
    return new_state, symmetrize(np.asarray(cov)[np.ix_(keep, keep)])


def init_slam_feature(
    state: RobotState,
    cov: np.ndarray,
    feature_id: int,
    position_estimate,
    prior_cov_3x3,
    cross_cov=None,
):
    """Append a landmark with a frozen first estimate.

    ``prior_cov_3x3`` is the new diagonal block; ``cross_cov`` (3 x old_dim)
    carries correlation with the existing state, zero when omitted. Delayed
    initialization from a triangulation linear system supplies both (see
    updates.delayed_feature_init).
    """
    if len(state.slam) >= state.slam.capacity:
        raise ValueError("slam map at capacity; evict before init")
    if state.slam.get(feature_id) is not None:
        raise ValueError(f"feature {feature_id} already in map")
    p = np.asarray(position_estimate, dtype=float)
    prior = np.asarray(prior_cov_3x3, dtype=float)
    n = state.error_dim()
    new_state = state.copy()
    new_state.slam.features.append(SlamFeature(feature_id, p.copy(), p.copy()))
    out = np.zeros((n + FEAT_DOF, n + FEAT_DOF))
    out[:n, :n] = cov
    out[n:, n:] = prior
    if cross_cov is not None:
        c = np.asarray(cross_cov, dtype=float)
        out[n:, :n] = c
        out[:n, n:] = c.T
    return new_state, symmetrize(out)


def remove_slam_feature(state: RobotState, cov: np.ndarray, feature_id: int):
    """Marginalize a landmark out of the state."""
    i = state.slam.index_of(feature_id)
    if i is None:
        raise KeyError(f"feature {feature_id} not in map")
    idx = ErrorIndex(state)
    s = idx.feat(feature_id)
    new_state = state.copy()
    del new_state.slam.features[i]
    keep = np.r_[np.arange(0, s.start), np.arange(s.stop, idx.dim)]
    return new_state, symmetrize(np.asarray(cov)[np.ix_(keep, keep)])


def apply_correction(state: RobotState, dx: np.ndarray) -> RobotState:
    """Retract an error-state correction onto the state manifold."""
    idx = ErrorIndex(state)
    if dx.shape[0] != idx.dim:
        raise ValueError(f"correction dim {dx.shape[0]} != state dim {idx.dim}")
    out = state.copy()
    out.imu.orientation = so3.quat_boxplus(state.imu.orientation, dx[idx.theta])
    out.imu.position = state.imu.position + dx[idx.pos]
    out.imu.velocity = state.imu.velocity + dx[idx.vel]
    out.imu.gyro_bias = state.imu.gyro_bias + dx[idx.bg]
    out.imu.accel_bias = state.imu.accel_bias + dx[idx.ba]
    if idx.calib is not None:
        c = idx.calib.start
        out.calib.time_offset = state.calib.time_offset + dx[c]
        out.calib.extrinsic_rotation = so3.quat_boxplus(
            state.calib.extrinsic_rotation, dx[c + 1:c + 4]
        )
        out.calib.extrinsic_translation = state.calib.extrinsic_translation + dx[c + 4:c + 7]
        out.calib.intrinsics = state.calib.intrinsics + dx[c + 7:c + 15]
    for clone in out.clones:
        s = idx.clone(clone.timestamp)
        clone.orientation = so3.quat_boxplus(clone.orientation, dx[s.start:s.start + 3])
        clone.position = clone.position + dx[s.start + 3:s.stop]
    for feat in out.slam:
        s = idx.feat(feat.feature_id)
        feat.position = feat.position + dx[s]
        # first_estimate stays frozen
    return out


def initial_covariance(
    state: RobotState,
    sigma_theta: float = 1e-3,
    sigma_pos: float = 1e-3,
    sigma_vel: float = 1e-2,
    sigma_bg: float = 1e-3,
    sigma_ba: float = 1e-2,
    sigma_calib: float = 1e-6,
) -> np.ndarray:
    d = state.error_dim()
    P = np.zeros((d, d))
    P[TH, TH] = sigma_theta**2 * np.eye(3)
    P[POS, POS] = sigma_pos**2 * np.eye(3)
    P[VEL, VEL] = sigma_vel**2 * np.eye(3)
    P[BG, BG] = sigma_bg**2 * np.eye(3)
    P[BA, BA] = sigma_ba**2 * np.eye(3)
    if state.estimate_calibration:
        P[IMU_DOF:IMU_DOF + CALIB_DOF, IMU_DOF:IMU_DOF + CALIB_DOF] = (
            sigma_calib**2 * np.eye(CALIB_DOF)
        )
    return P
