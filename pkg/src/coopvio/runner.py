"""Estimator-variant orchestration: scenario generation, frame loop, reports.

One run: for each Monte Carlo seed, generate the scenario, execute the chosen
estimator variant over all robots (lockstep frame loop over a pluggable
transport), evaluate against ground truth, and write CSV artifacts plus a
manifest sufficient to reproduce the run byte-for-byte.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .agent import (
    VARIANTS,
    AgentConfig,
    CentralizedEstimator,
    RobotAgent,
    initial_robot_state,
    perturbed_initial,
)
from .comms import make_transport
from .evaluation import (
    MetricReport,
    align_and_ate,
    from_records,
    gt_trajectory,
    nees,
    rmse_series,
    rpe,
    write_metrics_csv,
    write_series_csv,
    write_update_log_csv,
)
from .propagation import NoiseParams
from .simulator import ScenarioConfig, generate_scenario, scenario_presets
from .state import initial_covariance
from .updates import FilterConfig


@dataclass
class RunConfig:
    scenario: str = "ar3"  # preset name or path to a scenario yaml
    variant: str = "dc-cmsckf"
    seeds: list = field(default_factory=lambda: list(range(20)))
    window_size: int | None = None
    slam_capacity: int | None = None
    ci_weight_other: float = 0.001
    constraint_weight_other: float = 0.005
    constraint_sigma: float = 0.02
    miss_rate: float = 0.0
    false_match_rate: float = 0.0
    geometry_gate_px: float | None = None
    imu_noise_inflation: float = 2.0  # filter-side density multiplier
    transport: str = "bus"  # bus | sockets
    out_dir: str | None = None
    zero_noise: bool = False
    keyframe_period: float = 1.0
    rpe_segments: list = field(default_factory=list)
    divergence_factor: float = 10.0

    def to_dict(self):
        d = dict(self.__dict__)
        d["seeds"] = list(self.seeds)
        d["rpe_segments"] = list(self.rpe_segments)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))


def load_scenario(name_or_path: str) -> ScenarioConfig:
    presets = scenario_presets()
    if name_or_path in presets:
        return presets[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        with open(path) as f:
            return ScenarioConfig.from_dict(yaml.safe_load(f))
    raise ValueError(f"unknown scenario {name_or_path!r} (not a preset or file)")


def agent_config(run_cfg: RunConfig, scenario: ScenarioConfig) -> AgentConfig:
    if run_cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {run_cfg.variant!r}; "
                         f"choose from {sorted(VARIANTS)}")
    flags = VARIANTS[run_cfg.variant]
    filt = FilterConfig(
        sigma_px=scenario.sigma_px,
        ci_weight_other=run_cfg.ci_weight_other,
        constraint_weight_other=run_cfg.constraint_weight_other,
        constraint_sigma=run_cfg.constraint_sigma,
    )
    f = run_cfg.imu_noise_inflation
    filter_noise = NoiseParams(
        gyro_white=scenario.noise.gyro_white * f,
        gyro_walk=scenario.noise.gyro_walk * f,
        accel_white=scenario.noise.accel_white * f,
        accel_walk=scenario.noise.accel_walk * f,
        gravity_mag=scenario.noise.gravity_mag,
    )
    return AgentConfig(
        window_size=run_cfg.window_size or scenario.num_clones,
        slam_capacity=run_cfg.slam_capacity or scenario.num_slam,
        filter=filt,
        noise=filter_noise,
        flags=flags,
        keyframe_period=run_cfg.keyframe_period,
        miss_rate=run_cfg.miss_rate,
        false_match_rate=run_cfg.false_match_rate,
        geometry_gate_px=run_cfg.geometry_gate_px,
        cam_period=1.0 / scenario.cam_rate,
    )


def _imu_chunks(samples, frame_times):
    """Per-frame sample slices [t_{k-1}, t_k], boundary samples included."""
    chunks = [[]]
    idx = 0
    for k in range(1, len(frame_times)):
        t0, t1 = frame_times[k - 1], frame_times[k]
        chunk = []
        while idx < len(samples) and samples[idx].timestamp < t0 - 1e-9:
            idx += 1
        j = idx
        while j < len(samples) and samples[j].timestamp <= t1 + 1e-9:
            chunk.append(samples[j])
            j += 1
        idx = j - 1  # boundary sample reused by the next chunk
        chunks.append(chunk)
    return chunks


def run_single_seed(sim, run_cfg: RunConfig, seed: int):
    """Execute one variant over one generated scenario; returns run products."""
    scenario = sim.config
    cfg = agent_config(run_cfg, scenario)
    rids = sorted(sim.robots.keys())
    frame_times = [fr[0] for fr in sim.robots[rids[0]].frames]
    chunks = {rid: _imu_chunks(sim.robots[rid].imu, frame_times) for rid in rids}
    world_positions = {int(i): p for i, p in zip(sim.world.feature_ids,
                                                 sim.world.positions)}
    cov0_proto = None
    per_robot_cov0 = {}
    initials = {}
    for rid in rids:
        state0 = initial_robot_state(rid, sim.robots[rid].trajectory, sim.calib,
                                     cfg.window_size, cfg.slam_capacity)
        cov0 = initial_covariance(state0)
        if run_cfg.zero_noise:
            initials[rid] = state0  # pure linearization-error check
        else:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, rid, 0xA11)))
            initials[rid] = perturbed_initial(state0, cov0, rng)
        per_robot_cov0[rid] = cov0

    if cfg.flags.centralized:
        est = CentralizedEstimator(initials, per_robot_cov0, cfg,
                                   world_positions=world_positions, assoc_seed=seed)
        for k, t in enumerate(frame_times):
            est.step(t, {rid: chunks[rid][k] for rid in rids},
                     {rid: sim.robots[rid].frames[k][1] for rid in rids})
        records = est.records
        logs = est.update_log
        per_frame_ms = est.step_time_total / max(len(frame_times), 1) * 1e3
        return records, logs, per_frame_ms, None

    transport = make_transport(run_cfg.transport)
    agents = {}
    for rid in rids:
        transport.register(rid)
        agents[rid] = RobotAgent(rid, initials[rid], per_robot_cov0[rid], cfg,
                                 world_positions=world_positions, assoc_seed=seed)
    needs_comm = cfg.flags.use_common_vio or cfg.flags.use_common_slam or cfg.flags.use_history
    try:
        for k, t in enumerate(frame_times):
            if needs_comm:
                expected = (len(rids) - 1) if k > 0 else 0
                for rid in rids:
                    pkts = transport.drain(rid, now=t, expected=expected)
                    agents[rid].ingest_packets(pkts)
            for rid in rids:
                pkt = agents[rid].step(t, chunks[rid][k], sim.robots[rid].frames[k][1])
                if pkt is not None and needs_comm:
                    transport.publish(pkt, now=t)
    finally:
        transport.close()
    records = {rid: agents[rid].records for rid in rids}
    logs = [row for rid in rids for row in agents[rid].update_log]
    per_frame_ms = sum(a.step_time_total for a in agents.values()) \
        / max(len(frame_times), 1) * 1e3
    return records, logs, per_frame_ms, agents


def evaluate_seed(sim, records, run_cfg: RunConfig, variant, seed) -> MetricReport:
    per_robot = {}
    rpe_tables = {}
    nees_means = {}
    rmse = {}
    nees_series = {}
    scale = _scenario_scale(sim)
    diverged = False
    for rid, recs in records.items():
        est = from_records(recs)
        gt = gt_trajectory(sim.robots[rid].trajectory, est.timestamps)
        ate = align_and_ate(est, gt)
        per_robot[rid] = ate
        if ate[1] > run_cfg.divergence_factor * scale:
            diverged = True
        if run_cfg.rpe_segments:
            rpe_tables[rid] = rpe(est, gt, run_cfg.rpe_segments)
        o_series, p_series, _ = nees(est, gt)
        deg_series, m_series = rmse_series(est, gt)
        rmse[rid] = (est.timestamps, deg_series, m_series)
        nees_series[rid] = (est.timestamps, o_series, p_series)
        nees_means[rid] = (float(np.nanmean(o_series)), float(np.nanmean(p_series)))
    avg = (
        float(np.mean([v[0] for v in per_robot.values()])),
        float(np.mean([v[1] for v in per_robot.values()])),
    )
    return MetricReport(variant, seed, per_robot, avg, rpe_tables, nees_means,
                        rmse, nees_series, diverged)


def _scenario_scale(sim):
    rid = sorted(sim.robots.keys())[0]
    pos = np.array([sim.robots[rid].trajectory.position(t)
                    for t in np.linspace(0, sim.config.duration, 50)])
    return float(np.linalg.norm(pos - pos.mean(axis=0), axis=1).mean())


@dataclass
class RunSummary:
    variant: str
    reports: list
    average_ate: tuple
    mean_nees: tuple
    per_frame_ms: float
    diverged_seeds: list

    def to_dict(self):
        return {
            "variant": self.variant,
            "average_ate_deg": self.average_ate[0],
            "average_ate_m": self.average_ate[1],
            "mean_nees_orient": self.mean_nees[0],
            "mean_nees_pos": self.mean_nees[1],
            "per_frame_ms": self.per_frame_ms,
            "diverged_seeds": list(self.diverged_seeds),
            "seeds": [r.seed for r in self.reports],
        }


def run(run_cfg: RunConfig, scenario: ScenarioConfig | None = None) -> RunSummary:
    scenario = scenario or load_scenario(run_cfg.scenario)
    out_root = Path(run_cfg.out_dir) if run_cfg.out_dir else None
    reports = []
    frame_costs = []
    all_logs = []
    for seed in run_cfg.seeds:
        sim = generate_scenario(scenario, seed, zero_noise=run_cfg.zero_noise)
        records, logs, per_frame_ms, _ = run_single_seed(sim, run_cfg, seed)
        report = evaluate_seed(sim, records, run_cfg, run_cfg.variant, seed)
        reports.append(report)
        frame_costs.append(per_frame_ms)
        all_logs.extend(logs)
        if out_root:
            seed_dir = out_root / run_cfg.variant / f"seed_{seed:04d}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(report, seed_dir / "metrics.csv")
            write_series_csv(report, seed_dir / "series.csv")
            write_update_log_csv(logs, seed_dir / "updates.csv")
    ok = [r for r in reports if not r.diverged]
    use = ok if ok else reports
    avg = (
        float(np.mean([r.average_ate[0] for r in use])),
        float(np.mean([r.average_ate[1] for r in use])),
    )
    nees_mean = (
        float(np.mean([v[0] for r in use for v in r.nees_means.values()])),
        float(np.mean([v[1] for r in use for v in r.nees_means.values()])),
    )
    summary = RunSummary(run_cfg.variant, reports, avg, nees_mean,
                         float(np.mean(frame_costs)),
                         [r.seed for r in reports if r.diverged])
    if out_root:
        out_root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "package_version": __version__,
            "run_config": run_cfg.to_dict(),
            "scenario": scenario.to_dict(),
            "summary": summary.to_dict(),
        }
        with open(out_root / f"manifest_{run_cfg.variant}.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return summary


def sweep_robots(run_cfg: RunConfig, robot_counts, base_scenario=None,
                 duration: float = 12.0):
    """Timing sweep: same streams per count, distributed vs centralized."""
    from .simulator import TrajectorySpec

    rows = []
    for n in robot_counts:
        traj = [
            TrajectorySpec(r, "circle", duration, dict(
                center=[0, 0, 1.2], radius=2.4 + 0.15 * r,
                period=18.0 + 1.5 * r, phase=2 * math.pi * r / n,
                z_amp=0.1, sweep_amp=0.5, sweep_period=9.0 + r))
            for r in range(n)
        ]
        world = [
            {"kind": "cylinder", "count": 220, "center": [0, 0, 0], "radius": 1.4,
             "z_min": 0.4, "z_max": 1.6},
            {"kind": "ring-wall", "count": 500, "center": [0, 0, 0], "radius": 7.0,
             "thickness": 0.3, "z_min": 0.2, "z_max": 2.6},
        ]
        scen = ScenarioConfig(name=f"timing{n}", trajectories=traj, world_groups=world,
                              duration=duration, target_feats=25, num_slam=3)
        sim = generate_scenario(scen, run_cfg.seeds[0])
        dist_cfg = RunConfig(**{**run_cfg.to_dict(), "variant": "dc-full-window",
                                "seeds": [run_cfg.seeds[0]]})
        cent_cfg = RunConfig(**{**run_cfg.to_dict(), "variant": "ce-cmsckf-cslam",
                                "seeds": [run_cfg.seeds[0]]})
        _, _, ms_d, _ = run_single_seed(sim, dist_cfg, run_cfg.seeds[0])
        _, _, ms_c, _ = run_single_seed(sim, cent_cfg, run_cfg.seeds[0])
        rows.append({"robots": n, "distributed_ms": ms_d, "centralized_ms": ms_c})
    return rows


def write_sweep_csv(rows, path):
    import csv as _csv

    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["robots", "distributed_ms", "centralized_ms"])
        for r in rows:
            w.writerow([r["robots"], f"{r['distributed_ms']:.4f}",
                        f"{r['centralized_ms']:.4f}"])
