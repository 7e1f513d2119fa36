"""Estimator update paths.

Distributed robots track only their own state and auto-covariance; fusing
measurements that involve other robots uses the covariance-intersection (CI)
form of the EKF: the joint prior is treated as block-diagonal with each
participant's covariance inflated by 1/weight, and only the host robot's block
is corrected. Rows of a multi-robot system that involve no other robot update
without CI; rows that involve only other robots carry no information for the
host (no cross-covariance is tracked) and are dropped.

Covariance updates use the Joseph-stabilized form and are re-symmetrized.
Every update is chi-square gated at a configurable level.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .state import ErrorIndex, RobotState, apply_correction, symmetrize
from .vision import TriangulationError, measurement_jacobians, triangulate

_CHI2_CACHE: dict = {}


def chi2_threshold(dof: int, level: float = 0.95) -> float:
    key = (dof, level)
    if key not in _CHI2_CACHE:
        _CHI2_CACHE[key] = float(chi2_dist.ppf(level, dof))
    return _CHI2_CACHE[key]


@dataclass
class FilterConfig:
    sigma_px: float = 1.0
    chi2_level: float = 0.95
    cond_max: float = 1e12
    fej_clones: bool = False  # clone-pose anchors in landmark updates (see notes)
    ci_weight_other: float = 0.001  # per other robot, remainder to self
    constraint_weight_other: float = 0.005
    constraint_sigma: float = 0.02  # meters
    slam_sigma_scale: float = 2.0  # extra down-weight on landmark re-observations
    slam_init_sigma_floor: float = 0.05  # meters, added to the init prior diagonal
    min_obs_msckf: int = 3


@dataclass
class CiWeights:
    """Per-participant weights, strictly positive, summing to one."""

    weights: dict  # participant key -> weight

    def __post_init__(self):
        vals = np.array(list(self.weights.values()), dtype=float)
        if (vals <= 0).any():
            raise ValueError("CI weights must be strictly positive")
        if abs(vals.sum() - 1.0) > 1e-12:
            raise ValueError(f"CI weights must sum to 1 (got {vals.sum()!r})")

    def __getitem__(self, key):
        return self.weights[key]

    def __contains__(self, key):
        return key in self.weights

    @classmethod
    def for_participants(cls, self_key, other_keys, weight_other: float):
        others = list(other_keys)
        w = {k: weight_other for k in others}
        w[self_key] = 1.0 - weight_other * len(others)
        if w[self_key] <= 0:
            raise ValueError("other-robot weights leave no mass for the host")
        return cls(w)


@dataclass
class LinearizedSystem:
    """Stacked residual with per-participant Jacobian blocks and optional feature block."""

    residual: np.ndarray
    blocks: dict  # participant key -> (m, dim) jacobian
    noise_cov: np.ndarray
    feature: np.ndarray | None = None  # (m, 3) or None

    def __post_init__(self):
        m = self.residual.shape[0]
        for k, H in self.blocks.items():
            if H.shape[0] != m:
                raise ValueError(f"block {k} rows {H.shape[0]} != residual {m}")
        if self.noise_cov.shape != (m, m):
            raise ValueError("noise shape mismatch")
        if m and np.max(np.abs(self.noise_cov - self.noise_cov.T)) > 1e-9:
            raise ValueError("noise must be symmetric")
        if self.feature is not None and self.feature.shape != (m, 3):
            raise ValueError("feature block must be (m, 3)")

    @property
    def rows(self) -> int:
        return self.residual.shape[0]


@dataclass
class UpdateResult:
    accepted: bool
    kind: str
    rows: int
    chi2: float = 0.0
    reason: str = ""
    runtime_us: float = 0.0


@dataclass
class Participant:
    """Another estimate used in a CI update: live peer snapshot or archived window."""

    key: object  # robot id, or (robot_id, window_index) for archive entries
    state: RobotState
    cov: np.ndarray
    observations: list = field(default_factory=list)


@dataclass
class ArchiveHit:
    participant: Participant
    own_observations: list = field(default_factory=list)
    constraint_pair: tuple | None = None  # (own feature id, archived feature id)


class RankError(ValueError):
    pass


# ---------------------------------------------------------------------------
# linear-algebra cores


def kalman_core(P, H, r, R, cond_max: float = 1e12):
    """Standard EKF math: (dx, P_posterior, chi2). Joseph-form covariance."""
    S = symmetrize(H @ P @ H.T + R)
    if np.linalg.cond(S) > cond_max:
        raise RankError("innovation covariance ill-conditioned")
    gamma = float(r @ np.linalg.solve(S, r))
    K = np.linalg.solve(S, H @ P).T
    dx = K @ r
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
    return dx, P_new, gamma


def ci_core(P_i, H_i, others, r, R, w_i, cond_max: float = 1e12):
    """CI-EKF math for the host: prior Diag(P_i/w_i, P_o/w_o, ...), host-only correction.

    ``others``: list of (P_o, H_o, w_o). Algebraically identical to the plain
    CI covariance recursion, written in Joseph style so the result stays PSD.
    """
    Pbar = P_i / w_i
    S_self = H_i @ Pbar @ H_i.T
    S_rest = np.array(R, dtype=float, copy=True)
    for P_o, H_o, w_o in others:
        S_rest += H_o @ (P_o / w_o) @ H_o.T
    S = symmetrize(S_self + S_rest)
    if np.linalg.cond(S) > cond_max:
        raise RankError("innovation covariance ill-conditioned")
    gamma = float(r @ np.linalg.solve(S, r))
    K = np.linalg.solve(S, H_i @ Pbar).T
    dx = K @ r
    IKH = np.eye(Pbar.shape[0]) - K @ H_i
    P_new = symmetrize(IKH @ Pbar @ IKH.T + K @ symmetrize(S_rest) @ K.T)
    return dx, P_new, gamma


# ---------------------------------------------------------------------------
# projections


def nullspace_project(sys: LinearizedSystem) -> LinearizedSystem:
    """Eliminate the feature block by projecting onto its left nullspace.

    Requires a full-column-rank (m x 3) feature block with m >= 4 (two or more
    observations). Orthonormal projection keeps isotropic noise isotropic.
    """
    if sys.feature is None:
        raise ValueError("system has no feature block")
    if sys.rows < 4:
        raise RankError("need at least 4 rows (2 observations) to project")
    q, r = np.linalg.qr(sys.feature, mode="complete")
    if abs(r[2, 2]) < 1e-10 * max(1.0, abs(r[0, 0])):
        raise RankError("feature Jacobian rank-deficient")
    Q2 = q[:, 3:]
    return LinearizedSystem(
        residual=Q2.T @ sys.residual,
        blocks={k: Q2.T @ H for k, H in sys.blocks.items()},
        noise_cov=symmetrize(Q2.T @ sys.noise_cov @ Q2),
    )


def range_null_split(sys: LinearizedSystem):
    """Split one participant's rows into the feature-range and nullspace parts.

    Returns (range_sys with a (k<=3)-row feature block, null_sys without a
    feature block); either may be empty.
    """
    if sys.feature is None:
        raise ValueError("system has no feature block")
    m = sys.rows
    q, r = np.linalg.qr(sys.feature, mode="complete")
    diag = np.abs(np.diag(r[: min(m, 3), :3])) if m else np.array([])
    rank = int(np.sum(diag > 1e-10 * max(1.0, diag.max() if diag.size else 1.0)))
    Q1, Q2 = q[:, :rank], q[:, rank:]
    rng_sys = LinearizedSystem(
        residual=Q1.T @ sys.residual,
        blocks={k: Q1.T @ H for k, H in sys.blocks.items()},
        noise_cov=symmetrize(Q1.T @ sys.noise_cov @ Q1),
        feature=Q1.T @ sys.feature,
    )
    null_sys = LinearizedSystem(
        residual=Q2.T @ sys.residual,
        blocks={k: Q2.T @ H for k, H in sys.blocks.items()},
        noise_cov=symmetrize(Q2.T @ sys.noise_cov @ Q2),
    )
    return rng_sys, null_sys


# ---------------------------------------------------------------------------
# single-robot updates


def ekf_update(state: RobotState, cov, sys: LinearizedSystem, config: FilterConfig,
               gate: bool = True, kind: str = "ekf"):
    """Standard EKF update restricted to one robot; Joseph form + retraction."""
    keys = set(sys.blocks.keys())
    if keys != {state.robot_id}:
        raise ValueError(f"system references {keys}, expected {{{state.robot_id}}}")
    H = sys.blocks[state.robot_id]
    t0 = time.perf_counter()
    try:
        dx, P_new, gamma = kalman_core(cov, H, sys.residual, sys.noise_cov, config.cond_max)
    except RankError as exc:
        return state, cov, UpdateResult(False, kind, sys.rows, reason=str(exc))
    if gate and gamma > chi2_threshold(sys.rows, config.chi2_level):
        return state, cov, UpdateResult(False, kind, sys.rows, chi2=gamma, reason="chi2")
    new_state = apply_correction(state, dx)
    us = (time.perf_counter() - t0) * 1e6
    return new_state, P_new, UpdateResult(True, kind, sys.rows, chi2=gamma, runtime_us=us)


def ci_ekf_update(state_i: RobotState, cov_i, sys: LinearizedSystem, participant_covs: dict,
                  weights: CiWeights, config: FilterConfig, gate: bool = True,
                  kind: str = "ci"):
    """CI-EKF update of the host robot against other participants' snapshots.

    ``participant_covs`` maps the other keys in ``sys.blocks`` to their
    covariances (their states are already baked into the Jacobians). A missing
    snapshot or weight skips the update.
    """
    rid = state_i.robot_id
    if rid not in sys.blocks:
        raise ValueError("system does not involve the host robot")
    if rid not in weights:
        return state_i, cov_i, UpdateResult(False, kind, sys.rows, reason="missing self weight")
    others = []
    for k, H_o in sys.blocks.items():
        if k == rid:
            continue
        if k not in participant_covs or participant_covs[k] is None:
            return state_i, cov_i, UpdateResult(False, kind, sys.rows,
                                                reason=f"missing snapshot {k}")
        if k not in weights:
            return state_i, cov_i, UpdateResult(False, kind, sys.rows,
                                                reason=f"missing weight {k}")
        others.append((participant_covs[k], H_o, weights[k]))
    t0 = time.perf_counter()
    try:
        dx, P_new, gamma = ci_core(cov_i, sys.blocks[rid], others, sys.residual,
                                   sys.noise_cov, weights[rid], config.cond_max)
    except RankError as exc:
        return state_i, cov_i, UpdateResult(False, kind, sys.rows, reason=str(exc))
    if gate and gamma > chi2_threshold(sys.rows, config.chi2_level):
        return state_i, cov_i, UpdateResult(False, kind, sys.rows, chi2=gamma, reason="chi2")
    new_state = apply_correction(state_i, dx)
    us = (time.perf_counter() - t0) * 1e6
    return new_state, P_new, UpdateResult(True, kind, sys.rows, chi2=gamma, runtime_us=us)


# ---------------------------------------------------------------------------
# measurement assembly


def observation_clone_time(obs, calib) -> float:
    """Clone-lookup time of an observation (camera stamp shifted by the offset)."""
    return obs.frame_timestamp - calib.time_offset


def feature_rows(state: RobotState, observations, p_f, fej_point=None,
                 config: FilterConfig | None = None):
    """Stack residual/Jacobian rows of one feature against a robot's clones.

    Observations without a matching clone are skipped; returns None if nothing
    matched. ``fej_point`` overrides the feature linearization point.
    """
    config = config or FilterConfig()
    idx = ErrorIndex(state)
    rows_H, rows_f, rows_r, sig = [], [], [], []
    for obs in observations:
        t = observation_clone_time(obs, state.calib)
        ci = state.clones.index_of(t)
        if ci is None:
            continue
        clone = state.clones.clones[ci]
        try:
            res, H_pose, H_f, H_cal = measurement_jacobians(
                clone.orientation, clone.position, state.calib, p_f, obs.uv,
                lin_feature=fej_point,
                with_calib=state.estimate_calibration,
            )
        except ValueError:
            continue
        H = np.zeros((2, idx.dim))
        H[:, idx.clone(clone.timestamp)] = H_pose
        if state.estimate_calibration and H_cal is not None:
            H[:, idx.calib] = H_cal
        rows_H.append(H)
        rows_f.append(H_f)
        rows_r.append(res)
        sig.extend([obs.noise_sigma] * 2)
    if not rows_H:
        return None
    return LinearizedSystem(
        residual=np.concatenate(rows_r),
        blocks={state.robot_id: np.vstack(rows_H)},
        noise_cov=np.diag(np.square(sig)),
        feature=np.vstack(rows_f),
    )


def _triangulated_system(state, track, config):
    """Triangulate a track against the robot's own clones; (system, point) or None."""
    obs, poses = [], []
    for o in track.observations:
        t = observation_clone_time(o, state.calib)
        ci = state.clones.index_of(t)
        if ci is None:
            continue
        clone = state.clones.clones[ci]
        obs.append(o)
        poses.append((clone.orientation, clone.position))
    if len(obs) < max(2, config.min_obs_msckf):
        return None
    try:
        p_f, _ = triangulate(obs, poses, state.calib)
    except TriangulationError:
        return None
    sys = feature_rows(state, obs, p_f, config=config)
    if sys is None:
        return None
    return sys, p_f


# ---------------------------------------------------------------------------
# independent updates


def msckf_update(state: RobotState, cov, tracks, config: FilterConfig):
    """Independent sliding-window update: triangulate, project out, batch EKF.

    Features are chi-square gated individually; accepted projected rows are
    stacked into a single update.
    """
    results = []
    stacked = []
    t_start = time.perf_counter()
    for track in tracks:
        built = _triangulated_system(state, track, config)
        if built is None:
            results.append(UpdateResult(False, "msckf", 0, reason="triangulation"))
            continue
        sys, _ = built
        try:
            proj = nullspace_project(sys)
        except RankError as exc:
            results.append(UpdateResult(False, "msckf", sys.rows, reason=str(exc)))
            continue
        try:
            _, _, gamma = kalman_core(cov, proj.blocks[state.robot_id], proj.residual,
                                      proj.noise_cov, config.cond_max)
        except RankError as exc:
            results.append(UpdateResult(False, "msckf", proj.rows, reason=str(exc)))
            continue
        if gamma > chi2_threshold(proj.rows, config.chi2_level):
            results.append(UpdateResult(False, "msckf", proj.rows, chi2=gamma, reason="chi2"))
            continue
        stacked.append(proj)
    if not stacked:
        return state, cov, results
    big = LinearizedSystem(
        residual=np.concatenate([s.residual for s in stacked]),
        blocks={state.robot_id: np.vstack([s.blocks[state.robot_id] for s in stacked])},
        noise_cov=blkdiag([s.noise_cov for s in stacked]),
    )
    state, cov, res = ekf_update(state, cov, big, config, gate=False, kind="msckf")
    res.runtime_us = (time.perf_counter() - t_start) * 1e6
    results.append(res)
    return state, cov, results


def fej_slam_update(state: RobotState, cov, feature_obs, config: FilterConfig):
    """Update in-state landmarks, Jacobians at the frozen first estimates.

    ``feature_obs`` maps feature_id -> new observations. Landmarks are gated
    individually and the survivors stacked into one EKF update.
    """
    idx = ErrorIndex(state)
    rows_H, rows_r, sig = [], [], []
    results = []
    t0 = time.perf_counter()
    for fid, obs_list in feature_obs.items():
        feat = state.slam.get(fid)
        if feat is None:
            continue
        per_H, per_r, per_sig = [], [], []
        for obs in obs_list:
            t = observation_clone_time(obs, state.calib)
            ci = state.clones.index_of(t)
            if ci is None:
                continue
            clone = state.clones.clones[ci]
            lin_q = clone.first_orientation if config.fej_clones else None
            lin_p = clone.first_position if config.fej_clones else None
            try:
                res, H_pose, H_f, H_cal = measurement_jacobians(
                    clone.orientation, clone.position, state.calib,
                    feat.position, obs.uv, lin_orientation=lin_q,
                    lin_position=lin_p, lin_feature=feat.first_estimate,
                    with_calib=state.estimate_calibration,
                )
            except ValueError:
                continue
            H = np.zeros((2, idx.dim))
            H[:, idx.clone(clone.timestamp)] = H_pose
            H[:, idx.feat(fid)] = H_f
            if state.estimate_calibration and H_cal is not None:
                H[:, idx.calib] = H_cal
            per_H.append(H)
            per_r.append(res)
            per_sig.extend([obs.noise_sigma * config.slam_sigma_scale] * 2)
        if not per_H:
            continue
        Hs, rs = np.vstack(per_H), np.concatenate(per_r)
        Rs = np.diag(np.square(per_sig))
        try:
            _, _, gamma = kalman_core(cov, Hs, rs, Rs, config.cond_max)
        except RankError:
            results.append(UpdateResult(False, "slam", Hs.shape[0], reason="conditioning"))
            continue
        if gamma > chi2_threshold(Hs.shape[0], config.chi2_level):
            results.append(UpdateResult(False, "slam", Hs.shape[0], chi2=gamma, reason="chi2"))
            continue
        rows_H.append(Hs)
        rows_r.append(rs)
        sig.extend(per_sig)
    if not rows_H:
        return state, cov, results
    sys = LinearizedSystem(
        residual=np.concatenate(rows_r),
        blocks={state.robot_id: np.vstack(rows_H)},
        noise_cov=np.diag(np.square(sig)),
    )
    state, cov, res = ekf_update(state, cov, sys, config, gate=False, kind="slam")
    res.runtime_us = (time.perf_counter() - t0) * 1e6
    results.append(res)
    return state, cov, results


def delayed_feature_init(state: RobotState, cov, track, config: FilterConfig):
    """Move a mature track into the landmark map.

    The anchor and its covariance come from the feature-range rows of the
    triangulation linear system, cross terms from the measurement Jacobians;
    the leftover nullspace rows are applied as a window update. Returns
    (state, cov, results) or None when the geometry is unusable.
    """
    built = _triangulated_system(state, track, config)
    if built is None:
        return None
    sys, p_f = built
    m = sys.rows
    q, r = np.linalg.qr(sys.feature, mode="complete")
    if abs(r[2, 2]) < 1e-10 * max(1.0, abs(r[0, 0])):
        return None
    Q1 = q[:, :3]
    U = r[:3, :3]
    H1 = Q1.T @ sys.blocks[state.robot_id]
    r1 = Q1.T @ sys.residual
    R1 = Q1.T @ sys.noise_cov @ Q1
    Uinv = np.linalg.inv(U)
    prior = symmetrize(Uinv @ (H1 @ cov @ H1.T + R1) @ Uinv.T)
    prior += config.slam_init_sigma_floor**2 * np.eye(3)
    cross = -Uinv @ H1 @ cov
    p_init = p_f + Uinv @ r1
    from .state import init_slam_feature  # local import avoids a cycle at module load

    new_state, new_cov = init_slam_feature(state, cov, track.feature_id, p_init, prior, cross)
    results = [UpdateResult(True, "slam-init", 3)]
    if m > 3:
        Q2 = q[:, 3:]
        idx = ErrorIndex(new_state)
        H2 = np.zeros((m - 3, idx.dim))
        H2[:, : cov.shape[0]] = Q2.T @ sys.blocks[state.robot_id]
        sys2 = LinearizedSystem(
            residual=Q2.T @ sys.residual,
            blocks={state.robot_id: H2},
            noise_cov=symmetrize(Q2.T @ sys.noise_cov @ Q2),
        )
        new_state, new_cov, res2 = ekf_update(new_state, new_cov, sys2, config,
                                              kind="slam-init")
        results.append(res2)
    return new_state, new_cov, results


# ---------------------------------------------------------------------------
# cooperative updates


def common_vio_update(state_i: RobotState, cov_i, own_obs, others, config: FilterConfig,
                      weight_other: float | None = None):
    """Fuse a feature observed by this robot and by other participants.

    Per-participant range/null splits drop rows that involve only others; the
    stacked range parts lose the feature through a second projection and
    update via CI; the host's nullspace rows then update via a plain EKF with
    a linearly re-adjusted residual. The pair of sub-updates reproduces the
    combined big-projection system restricted to rows involving the host.
    """
    w_o = config.ci_weight_other if weight_other is None else weight_other
    t0 = time.perf_counter()
    built = _build_common_systems(state_i, cov_i, own_obs, others, config)
    if built is None:
        return state_i, cov_i, [UpdateResult(False, "common-vio", 0, reason="triangulation")]
    multi, own_null, covs, n_own_obs = built
    retained = (multi.rows if multi is not None else 0) + (own_null.rows if own_null else 0)
    assert retained <= 2 * n_own_obs + 3 * len(covs)

    results = []
    cov = cov_i
    dx_total = None
    P_cur = cov_i
    if multi is not None and multi.rows > 0:
        weights = CiWeights.for_participants(
            state_i.robot_id, [k for k in multi.blocks if k != state_i.robot_id], w_o
        )
        other_list = []
        ok = True
        for k, H_o in multi.blocks.items():
            if k == state_i.robot_id:
                continue
            if covs.get(k) is None or k not in weights:
                ok = False
                break
            other_list.append((covs[k], H_o, weights[k]))
        if ok:
            try:
                dx1, P1, gamma1 = ci_core(P_cur, multi.blocks[state_i.robot_id], other_list,
                                          multi.residual, multi.noise_cov,
                                          weights[state_i.robot_id], config.cond_max)
                if gamma1 > chi2_threshold(multi.rows, config.chi2_level):
                    results.append(UpdateResult(False, "common-vio", multi.rows,
                                                chi2=gamma1, reason="chi2"))
                else:
                    dx_total = dx1
                    P_cur = P1
                    results.append(UpdateResult(True, "common-vio", multi.rows, chi2=gamma1))
            except RankError as exc:
                results.append(UpdateResult(False, "common-vio", multi.rows, reason=str(exc)))
        else:
            results.append(UpdateResult(False, "common-vio", multi.rows, reason="missing snapshot"))
    if own_null is not None and own_null.rows > 0:
        H_own = own_null.blocks[state_i.robot_id]
        r_own = own_null.residual
        if dx_total is not None:
            r_own = r_own - H_own @ dx_total
        try:
            dx2, P2, gamma2 = kalman_core(P_cur, H_own, r_own, own_null.noise_cov,
                                          config.cond_max)
            if gamma2 > chi2_threshold(own_null.rows, config.chi2_level):
                results.append(UpdateResult(False, "common-vio-own", own_null.rows,
                                            chi2=gamma2, reason="chi2"))
            else:
                dx_total = dx2 if dx_total is None else dx_total + dx2
                P_cur = P2
                results.append(UpdateResult(True, "common-vio-own", own_null.rows, chi2=gamma2))
        except RankError as exc:
            results.append(UpdateResult(False, "common-vio-own", own_null.rows, reason=str(exc)))
    if dx_total is None:
        return state_i, cov_i, results or [UpdateResult(False, "common-vio", 0, reason="empty")]
    new_state = apply_correction(state_i, dx_total)
    if results:
        results[0].runtime_us = (time.perf_counter() - t0) * 1e6
    return new_state, P_cur, results


def _build_common_systems(state_i, cov_i, own_obs, others, config):
    """Triangulate from all views; build (multi_sys, own_null_sys, covs, n_own)."""
    obs_all, poses_all = [], []
    own_matched = []
    for o in own_obs:
        t = observation_clone_time(o, state_i.calib)
        ci = state_i.clones.index_of(t)
        if ci is None:
            continue
        clone = state_i.clones.clones[ci]
        own_matched.append(o)
        obs_all.append(o)
        poses_all.append((clone.orientation, clone.position))
    per_other = []
    for part in others:
        sub_obs, sub_poses = [], []
        for o in part.observations:
            t = observation_clone_time(o, part.state.calib)
            ci = part.state.clones.index_of(t)
            if ci is None:
                continue
            clone = part.state.clones.clones[ci]
            sub_obs.append(o)
            sub_poses.append((clone.orientation, clone.position))
        if sub_obs:
            per_other.append((part, sub_obs))
            obs_all.extend(sub_obs)
            poses_all.extend(sub_poses)
    if not own_matched or not per_other or len(obs_all) < 2:
        return None
    try:
        p_f, _ = triangulate(obs_all, poses_all, state_i.calib)
    except TriangulationError:
        return None

    own_sys = feature_rows(state_i, own_matched, p_f, config=config)
    if own_sys is None:
        return None
    own_range, own_null = range_null_split(own_sys)
    range_parts = [(state_i.robot_id, own_range)]
    covs = {}
    for part, sub_obs in per_other:
        sys_o = feature_rows(part.state, sub_obs, p_f, config=config)
        if sys_o is None:
            continue
        rng_o, _ = range_null_split(sys_o)
        if rng_o.rows == 0:
            continue
        rng_o.blocks = {part.key: rng_o.blocks[part.state.robot_id]}
        range_parts.append((part.key, rng_o))
        covs[part.key] = part.cov
    if len(range_parts) == 1:
        return None
    m_total = sum(s.rows for _, s in range_parts)
    resid = np.concatenate([s.residual for _, s in range_parts])
    feat = np.vstack([s.feature for _, s in range_parts])
    noise = blkdiag([s.noise_cov for _, s in range_parts])
    blocks = {}
    off = 0
    for key, s in range_parts:
        Hk = s.blocks[key]
        H = np.zeros((m_total, Hk.shape[1]))
        H[off:off + s.rows] = Hk
        blocks[key] = H
        off += s.rows
    stacked = LinearizedSystem(residual=resid, blocks=blocks, noise_cov=noise, feature=feat)
    try:
        multi = nullspace_project(stacked) if stacked.rows >= 4 else None
    except RankError:
        multi = None
    if own_null.rows == 0:
        own_null = None
    return multi, own_null, covs, len(own_matched)


def slam_grab_update(state_i: RobotState, cov_i, fid_own: int, other: Participant,
                     obs_list, config: FilterConfig, weight_other: float | None = None,
                     kind: str = "common-slam"):
    """Update a local landmark with another participant's raw measurements.

    Each observation constrains the landmark (in the host state) through the
    other robot's snapshot clone pose; the system spans both robots, so the
    host fuses it with CI. Landmark Jacobians use the frozen first estimate.
    """
    w_o = config.ci_weight_other if weight_other is None else weight_other
    feat = state_i.slam.get(fid_own)
    if feat is None:
        return state_i, cov_i, UpdateResult(False, kind, 0, reason="missing feature")
    t0 = time.perf_counter()
    idx_i = ErrorIndex(state_i)
    idx_o = ErrorIndex(other.state)
    rows_i, rows_o, rows_r, sig = [], [], [], []
    for obs in obs_list:
        t = observation_clone_time(obs, other.state.calib)
        ci = other.state.clones.index_of(t)
        if ci is None:
            continue
        clone = other.state.clones.clones[ci]
        try:
            res, H_pose, H_f, _ = measurement_jacobians(
                clone.orientation, clone.position, other.state.calib,
                feat.position, obs.uv, lin_feature=feat.first_estimate,
            )
        except ValueError:
            continue
        H_i = np.zeros((2, idx_i.dim))
        H_i[:, idx_i.feat(fid_own)] = H_f
        H_o = np.zeros((2, idx_o.dim))
        H_o[:, idx_o.clone(clone.timestamp)] = H_pose
        rows_i.append(H_i)
        rows_o.append(H_o)
        rows_r.append(res)
        sig.extend([obs.noise_sigma] * 2)
    if not rows_i:
        return state_i, cov_i, UpdateResult(False, kind, 0, reason="no usable observations")
    sys = LinearizedSystem(
        residual=np.concatenate(rows_r),
        blocks={state_i.robot_id: np.vstack(rows_i), other.key: np.vstack(rows_o)},
        noise_cov=np.diag(np.square(sig)),
    )
    weights = CiWeights.for_participants(state_i.robot_id, [other.key], w_o)
    state, cov, res = ci_ekf_update(state_i, cov_i, sys, {other.key: other.cov},
                                    weights, config, kind=kind)
    res.runtime_us = (time.perf_counter() - t0) * 1e6
    return state, cov, res


def slam_constraint_update(state_i: RobotState, cov_i, other: Participant,
                           fid_own: int, fid_other: int, config: FilterConfig,
                           weight_other: float | None = None):
    """Equal-position constraint between a local landmark and another robot's.

    Residual 0 - (p_a - p_b), identity Jacobians on the two landmark slices,
    synthetic noise relaxing the hard constraint; host-only CI update.
    """
    w_o = config.constraint_weight_other if weight_other is None else weight_other
    feat_a = state_i.slam.get(fid_own)
    feat_b = other.state.slam.get(fid_other)
    if feat_a is None or feat_b is None:
        return state_i, cov_i, UpdateResult(False, "constraint", 0, reason="missing feature")
    t0 = time.perf_counter()
    idx_i = ErrorIndex(state_i)
    idx_o = ErrorIndex(other.state)
    H_i = np.zeros((3, idx_i.dim))
    H_i[:, idx_i.feat(fid_own)] = np.eye(3)
    H_o = np.zeros((3, idx_o.dim))
    H_o[:, idx_o.feat(fid_other)] = -np.eye(3)
    sys = LinearizedSystem(
        residual=-(feat_a.position - feat_b.position),
        blocks={state_i.robot_id: H_i, other.key: H_o},
        noise_cov=config.constraint_sigma**2 * np.eye(3),
    )
    weights = CiWeights.for_participants(state_i.robot_id, [other.key], w_o)
    state, cov, res = ci_ekf_update(state_i, cov_i, sys, {other.key: other.cov},
                                    weights, config, kind="constraint")
    res.runtime_us = (time.perf_counter() - t0) * 1e6
    return state, cov, res


def historical_update(state_i: RobotState, cov_i, archive_hits, config: FilterConfig):
    """Loop-closure updates against stored windows (other robots' or our own).

    Routes each hit to the common-VIO or the constraint path with the frozen
    snapshot standing in as the other participant. Entries without covariance
    are skipped.
    """
    results = []
    state, cov = state_i, cov_i
    for hit in archive_hits:
        part = hit.participant
        if part.cov is None:
            results.append(UpdateResult(False, "historical", 0, reason="no covariance"))
            continue
        if hit.constraint_pair is not None:
            fid_own, fid_other = hit.constraint_pair
            state, cov, res = slam_constraint_update(state, cov, part, fid_own, fid_other,
                                                     config)
            res.kind = "hist-constraint"
            results.append(res)
        else:
            state, cov, res_list = common_vio_update(state, cov, hit.own_observations,
                                                     [part], config)
            for res in res_list:
                res.kind = "hist-vio"
            results.extend(res_list)
    return state, cov, results


def blkdiag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    off = 0
    for m in mats:
        k = m.shape[0]
        out[off:off + k, off:off + k] = m
        off += k
    return out
