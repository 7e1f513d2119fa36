"""Trajectory and consistency metrics: ATE, RPE, RMSE series, NEES, timing.

ATE aligns the estimate to ground truth with a (no-scale) Umeyama fit first,
so it is invariant to the global gauge. Orientation errors are log-map angles.
NEES uses the same local error convention as the filter, per 3-dof block.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import so3


@dataclass
class TrajectoryEstimate:
    """Per-frame estimate with marginal pose covariance blocks."""

    timestamps: np.ndarray
    orientations: list  # quaternions, global -> IMU
    positions: np.ndarray  # (n, 3)
    cov_theta: list | None = None  # (3,3) blocks
    cov_pos: list | None = None


def from_records(records) -> TrajectoryEstimate:
    return TrajectoryEstimate(
        timestamps=np.array([r.timestamp for r in records]),
        orientations=[r.orientation for r in records],
        positions=np.array([r.position for r in records]),
        cov_theta=[r.cov_theta for r in records],
        cov_pos=[r.cov_pos for r in records],
    )


def gt_trajectory(traj, timestamps) -> TrajectoryEstimate:
    qs, ps = [], []
    for t in timestamps:
        q, p = traj.pose(float(t))
        qs.append(q)
        ps.append(p)
    return TrajectoryEstimate(np.asarray(timestamps), qs, np.array(ps))


def umeyama_se3(src: np.ndarray, dst: np.ndarray):
    """Rigid transform (R, t) minimizing ||R src + t - dst||^2, no scale."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def align_and_ate(est: TrajectoryEstimate, gt: TrajectoryEstimate):
    """SE(3)-aligned RMS errors, (orientation degrees, position meters)."""
    if len(est.timestamps) < 2:
        raise ValueError("need at least two matched poses")
    if len(est.timestamps) != len(gt.timestamps):
        raise ValueError("timestamp sets must match")
    R_a, t_a = umeyama_se3(est.positions, gt.positions)
    pos_err = (est.positions @ R_a.T + t_a) - gt.positions
    rms_pos = math.sqrt(float((pos_err**2).sum(axis=1).mean()))
    ang2 = 0.0
    for q_est, q_gt in zip(est.orientations, gt.orientations):
        R_est = so3.quat_to_rot(q_est) @ R_a.T  # rotate the estimate's global frame
        R_gt = so3.quat_to_rot(q_gt)
        ang = np.linalg.norm(so3.so3_log(R_gt @ R_est.T))
        ang2 += ang * ang
    rms_deg = math.degrees(math.sqrt(ang2 / len(est.orientations)))
    return rms_deg, rms_pos


def _arc_length(positions):
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rpe(est: TrajectoryEstimate, gt: TrajectoryEstimate, segment_lengths_m):
    """Mean relative pose error per segment length: {L: (deg, m)}."""
    arc = _arc_length(gt.positions)
    total = arc[-1]
    out = {}
    for L in segment_lengths_m:
        if L >= total:
            raise ValueError(f"trajectory ({total:.1f} m) shorter than segment {L} m")
        angs, trans = [], []
        j = 0
        for i in range(len(arc)):
            target = arc[i] + L
            if target > total:
                break
            j = int(np.searchsorted(arc, target, side="left"))
            # relative motion in the frames of pose i
            R_gt_i = so3.quat_to_rot(gt.orientations[i])
            R_gt_j = so3.quat_to_rot(gt.orientations[j])
            R_es_i = so3.quat_to_rot(est.orientations[i])
            R_es_j = so3.quat_to_rot(est.orientations[j])
            dR_gt = R_gt_i @ R_gt_j.T
            dR_es = R_es_i @ R_es_j.T
            dp_gt = R_gt_i @ (gt.positions[j] - gt.positions[i])
            dp_es = R_es_i @ (est.positions[j] - est.positions[i])
            E = dR_gt.T @ dR_es
            angs.append(np.linalg.norm(so3.so3_log(E)))
            trans.append(np.linalg.norm(dp_es - dp_gt))
        if not angs:
            raise ValueError(f"no segments of length {L} m")
        out[L] = (math.degrees(float(np.mean(angs))), float(np.mean(trans)))
    return out


def nees(est: TrajectoryEstimate, gt: TrajectoryEstimate, min_eig: float = 1e-15):
    """3-dof orientation and position NEES time series; non-PD blocks skipped."""
    n_skipped = 0
    orient, pos = [], []
    for k in range(len(est.timestamps)):
        P_th = est.cov_theta[k]
        P_p = est.cov_pos[k]
        if np.linalg.eigvalsh(P_th).min() <= min_eig or np.linalg.eigvalsh(P_p).min() <= min_eig:
            n_skipped += 1
            orient.append(np.nan)
            pos.append(np.nan)
            continue
        R_est = so3.quat_to_rot(est.orientations[k])
        R_gt = so3.quat_to_rot(gt.orientations[k])
        # R_gt = exp(-skew(dth)) R_est under the filter's error convention
        dth = -so3.so3_log(R_gt @ R_est.T)
        e_p = gt.positions[k] - est.positions[k]
        orient.append(float(dth @ np.linalg.solve(P_th, dth)))
        pos.append(float(e_p @ np.linalg.solve(P_p, e_p)))
    return np.array(orient), np.array(pos), n_skipped


def rmse_series(est: TrajectoryEstimate, gt: TrajectoryEstimate):
    """(orientation deg, position m) error magnitudes per frame, no alignment."""
    ang = []
    for q_est, q_gt in zip(est.orientations, gt.orientations):
        R_est = so3.quat_to_rot(q_est)
        R_gt = so3.quat_to_rot(q_gt)
        ang.append(math.degrees(np.linalg.norm(so3.so3_log(R_gt @ R_est.T))))
    dpos = np.linalg.norm(est.positions - gt.positions, axis=1)
    return np.array(ang), dpos


@dataclass
class MetricReport:
    variant: str
    seed: int
    per_robot_ate: dict  # rid -> (deg, m)
    average_ate: tuple
    rpe_tables: dict = field(default_factory=dict)  # rid -> {L: (deg, m)}
    nees_means: dict = field(default_factory=dict)  # rid -> (orient, pos)
    rmse: dict = field(default_factory=dict)  # rid -> (t, deg-series, m-series)
    nees_series: dict = field(default_factory=dict)  # rid -> (t, orient, pos)
    diverged: bool = False

    def ate_csv_rows(self):
        rows = [("robot", "ate_deg", "ate_m")]
        for rid in sorted(self.per_robot_ate):
            d, m = self.per_robot_ate[rid]
            rows.append((rid, f"{d:.9f}", f"{m:.9f}"))
        rows.append(("average", f"{self.average_ate[0]:.9f}", f"{self.average_ate[1]:.9f}"))
        return rows


def write_metrics_csv(report: MetricReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", report.variant])
        w.writerow(["seed", report.seed])
        w.writerow(["diverged", int(report.diverged)])
        for row in report.ate_csv_rows():
            w.writerow(row)
        for rid, table in sorted(report.rpe_tables.items()):
            for L, (d, m) in sorted(table.items()):
                w.writerow(["rpe", rid, L, f"{d:.9f}", f"{m:.9f}"])
        for rid, (o, p) in sorted(report.nees_means.items()):
            w.writerow(["nees", rid, f"{o:.9f}", f"{p:.9f}"])


def write_series_csv(report: MetricReport, path):
    """Plot-data: one row per (robot, t) with rmse and nees columns."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["robot", "t", "rmse_deg", "rmse_m", "nees_orient", "nees_pos"])
        for rid in sorted(report.rmse):
            t, deg, m = report.rmse[rid]
            _, no, np_ = report.nees_series[rid]
            for k in range(len(t)):
                w.writerow([rid, f"{t[k]:.3f}", f"{deg[k]:.9f}", f"{m[k]:.9f}",
                            f"{no[k]:.9f}", f"{np_[k]:.9f}"])


def timing_report(update_logs: dict, per_frame_ms: dict):
    """Aggregate per-update and per-frame timing.

    ``update_logs``: variant/robot-count key -> list of UpdateLogRow.
    ``per_frame_ms``: key -> list of per-frame millisecond costs.
    Returns {key: {"mean": .., "std": .., "kinds": {kind: (mean_us, std_us, n)}}}.
    """
    out = {}
    for key, frames in per_frame_ms.items():
        arr = np.asarray(frames, dtype=float)
        kinds = {}
        for row in update_logs.get(key, []):
            kinds.setdefault(row.kind, []).append(row.runtime_us)
        out[key] = {
            "mean": float(arr.mean()) if arr.size else 0.0,
            "std": float(arr.std()) if arr.size else 0.0,
            "kinds": {k: (float(np.mean(v)), float(np.std(v)), len(v))
                      for k, v in kinds.items()},
        }
    return out


def write_timing_csv(table: dict, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "per_frame_mean_ms", "per_frame_std_ms"])
        for key in sorted(table, key=str):
            w.writerow([key, f"{table[key]['mean']:.6f}", f"{table[key]['std']:.6f}"])


def write_update_log_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "robot", "kind", "rows", "chi2", "runtime_us"])
        for r in rows:
            w.writerow([f"{r.timestamp:.3f}", r.robot_id, r.kind, r.rows,
                        f"{r.chi2:.6f}", f"{r.runtime_us:.1f}"])
