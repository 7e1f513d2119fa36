"""Ground-truth trajectory, IMU, and bearing-measurement generation.

Trajectories are twice-differentiable parametric paths (circle, figure-eight,
periodic waypoint spline) with yaw-only body orientation, so rates and
specific forces have closed forms. The camera is mounted x-forward
(body x = optical axis): R_CI maps body axes to the usual z-forward camera
frame. Bias random walks are simulated, not just modeled.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import so3
from .propagation import ImuSample, NoiseParams
from .state import CalibrationState

# body -> camera: cam x = -body y, cam y = -body z, cam z = +body x
R_CAM_IMU = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class TrajectorySpec:
    robot_id: int
    kind: str  # circle | figure-eight | waypoint-spline
    duration: float
    params: dict = field(default_factory=dict)


@dataclass
class WorldMap:
    feature_ids: np.ndarray
    positions: np.ndarray  # (n, 3)

    def __len__(self):
        return len(self.feature_ids)


class Trajectory:
    """Closed-form path with yaw-only orientation; subclasses define the planar law."""

    def position(self, t):
        raise NotImplementedError

    def velocity(self, t):
        raise NotImplementedError

    def acceleration(self, t):
        raise NotImplementedError

    def yaw(self, t):
        raise NotImplementedError

    def yaw_rate(self, t):
        raise NotImplementedError

    def rotation(self, t):
        """R global -> body (yaw-only)."""
        c, s = math.cos(self.yaw(t)), math.sin(self.yaw(t))
        # R_ItoG = Rz(yaw); global->body is its transpose
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])

    def orientation_quat(self, t):
        return so3.rot_to_quat(self.rotation(t))

    def angular_velocity_body(self, t):
        return np.array([0.0, 0.0, self.yaw_rate(t)])

    def pose(self, t):
        return self.orientation_quat(t), self.position(t)


class CircleTrajectory(Trajectory):
    """Orbit at constant angular rate; gaze = heading offset from the radial-in
    direction plus an optional sinusoidal sweep (controls co-visibility)."""

    def __init__(self, center, radius, period, phase=0.0, z_amp=0.0, z_period=None,
                 gaze_offset=0.0, sweep_amp=0.0, sweep_period=10.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.om = 2.0 * math.pi / period
        self.phase = float(phase)
        self.z_amp = float(z_amp)
        self.z_om = 2.0 * math.pi / (z_period if z_period else period / 2.0)
        self.gaze_offset = float(gaze_offset)
        self.sweep_amp = float(sweep_amp)
        self.sweep_om = 2.0 * math.pi / sweep_period

    def _theta(self, t):
        return self.phase + self.om * t

    def position(self, t):
        th = self._theta(t)
        return self.center + np.array(
            [
                self.radius * math.cos(th),
                self.radius * math.sin(th),
                self.z_amp * math.sin(self.z_om * t),
            ]
        )

    def velocity(self, t):
        th = self._theta(t)
        return np.array(
            [
                -self.radius * self.om * math.sin(th),
                self.radius * self.om * math.cos(th),
                self.z_amp * self.z_om * math.cos(self.z_om * t),
            ]
        )

    def acceleration(self, t):
        th = self._theta(t)
        return np.array(
            [
                -self.radius * self.om**2 * math.cos(th),
                -self.radius * self.om**2 * math.sin(th),
                -self.z_amp * self.z_om**2 * math.sin(self.z_om * t),
            ]
        )

    def yaw(self, t):
        # radially inward plus configured gaze behavior
        return (
            self._theta(t)
            + math.pi
            + self.gaze_offset
            + self.sweep_amp * math.sin(self.sweep_om * t)
        )

    def yaw_rate(self, t):
        return self.om + self.sweep_amp * self.sweep_om * math.cos(self.sweep_om * t)


class FigureEightTrajectory(Trajectory):
    """Gerono lemniscate in the plane, heading along the velocity."""

    def __init__(self, center, size_x, size_y, period, phase=0.0, z_amp=0.0):
        self.center = np.asarray(center, dtype=float)
        self.ax = float(size_x)
        self.ay = float(size_y)
        self.om = 2.0 * math.pi / period
        self.phase = float(phase)
        self.z_amp = float(z_amp)

    def position(self, t):
        u = self.om * t + self.phase
        return self.center + np.array(
            [self.ax * math.sin(u), self.ay * math.sin(2 * u) / 2.0,
             self.z_amp * math.sin(u)]
        )

    def velocity(self, t):
        u = self.om * t + self.phase
        return self.om * np.array(
            [self.ax * math.cos(u), self.ay * math.cos(2 * u),
             self.z_amp * math.cos(u)]
        )

    def acceleration(self, t):
        u = self.om * t + self.phase
        return self.om**2 * np.array(
            [-self.ax * math.sin(u), -2.0 * self.ay * math.sin(2 * u),
             -self.z_amp * math.sin(u)]
        )

    def yaw(self, t):
        v = self.velocity(t)
        return math.atan2(v[1], v[0])

    def yaw_rate(self, t):
        v = self.velocity(t)
        a = self.acceleration(t)
        den = v[0] * v[0] + v[1] * v[1]
        return (v[0] * a[1] - v[1] * a[0]) / den


class SplineTrajectory(Trajectory):
    """Periodic cubic spline through waypoints, heading along the velocity."""

    def __init__(self, waypoints, period, phase=0.0):
        wp = np.asarray(waypoints, dtype=float)
        if not np.allclose(wp[0], wp[-1]):
            wp = np.vstack([wp, wp[0]])
        u = np.linspace(0.0, period, len(wp))
        self.period = float(period)
        self.phase = float(phase)
        self.spline = CubicSpline(u, wp, axis=0, bc_type="periodic")
        self.d1 = self.spline.derivative(1)
        self.d2 = self.spline.derivative(2)
        self.d3 = self.spline.derivative(3)

    def _u(self, t):
        return (t + self.phase) % self.period

    def position(self, t):
        return np.asarray(self.spline(self._u(t)))

    def velocity(self, t):
        return np.asarray(self.d1(self._u(t)))

    def acceleration(self, t):
        return np.asarray(self.d2(self._u(t)))

    def yaw(self, t):
        v = self.velocity(t)
        return math.atan2(v[1], v[0])

    def yaw_rate(self, t):
        v = self.velocity(t)
        a = self.acceleration(t)
        den = v[0] * v[0] + v[1] * v[1]
        if den < 1e-12:
            return 0.0
        return (v[0] * a[1] - v[1] * a[0]) / den


def build_trajectory(spec: TrajectorySpec) -> Trajectory:
    kinds = {
        "circle": CircleTrajectory,
        "figure-eight": FigureEightTrajectory,
        "waypoint-spline": SplineTrajectory,
    }
    if spec.kind not in kinds:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")
    return kinds[spec.kind](**spec.params)


def sample_imu(traj: Trajectory, duration: float, rate_hz: float, noise: NoiseParams,
               seed, perfect: bool = False):
    """Exact analytic rates and specific forces, bias walks, white noise.

    Returns (samples, bias_truth) where bias_truth is an (n, 6) array of the
    simulated gyro/accel biases at the sample times.
    """
    if rate_hz <= 0:
        raise ValueError("IMU rate must be positive")
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    n = int(round(duration * rate_hz)) + 1
    g = np.array([0.0, 0.0, -noise.gravity_mag])
    sg = noise.gyro_white * math.sqrt(rate_hz)
    sa = noise.accel_white * math.sqrt(rate_hz)
    swg = noise.gyro_walk * math.sqrt(dt)
    swa = noise.accel_walk * math.sqrt(dt)
    bg = np.zeros(3)
    ba = np.zeros(3)
    samples = []
    bias_truth = np.zeros((n, 6))
    for k in range(n):
        t = k * dt
        R = traj.rotation(t)
        w_true = traj.angular_velocity_body(t)
        a_true = R @ (traj.acceleration(t) - g)
        if perfect:
            w_m, a_m = w_true, a_true
        else:
            w_m = w_true + bg + sg * rng.standard_normal(3)
            a_m = a_true + ba + sa * rng.standard_normal(3)
        bias_truth[k, :3] = bg
        bias_truth[k, 3:] = ba
        samples.append(ImuSample(t, w_m, a_m))
        if not perfect:
            bg = bg + swg * rng.standard_normal(3)
            ba = ba + swa * rng.standard_normal(3)
    return samples, bias_truth


def sample_bearings(traj: Trajectory, world: WorldMap, calib: CalibrationState,
                    duration: float, rate_hz: float, sigma_px: float, seed,
                    image_size=(640, 480), max_range: float = 60.0,
                    target_mean_feats: int | None = None):
    """Project world features through the true camera poses per frame.

    Returns a list of (t, [(feature_id, uv), ...]). Culling: in front of the
    camera, range-limited, inside the image. If more features are visible than
    the per-frame target, a seeded subset is kept.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    n = int(round(duration * rate_hz)) + 1
    W, H = image_size
    fx, fy, cx, cy = calib.intrinsics[:4]
    k_dist = calib.intrinsics[4:8]
    R_CI = so3.quat_to_rot(calib.extrinsic_rotation)
    p_IC = calib.extrinsic_translation
    # stable per-feature "corner strength" so every robot selects the same
    # features in a shared view and tracks persist while a feature is visible
    strength = (world.feature_ids.astype(np.uint64) * np.uint64(2654435761)) % np.uint64(1 << 32)
    frames = []
    for k in range(n):
        t = k * dt
        R_GI = traj.rotation(t)
        p_I = traj.position(t)
        rel = world.positions - p_I
        pc = (R_CI @ (R_GI @ rel.T)).T + p_IC
        depth = pc[:, 2]
        ok = (depth > 0.2) & (np.linalg.norm(rel, axis=1) < max_range)
        zn = pc[ok, :2] / depth[ok, None]
        u = zn[:, 0]
        v = zn[:, 1]
        r2 = u * u + v * v
        d = 1.0 + k_dist[0] * r2 + k_dist[1] * r2 * r2
        ud = u * d + 2 * k_dist[2] * u * v + k_dist[3] * (r2 + 2 * u * u)
        vd = v * d + k_dist[2] * (r2 + 2 * v * v) + 2 * k_dist[3] * u * v
        px = fx * ud + cx
        py = fy * vd + cy
        inside = (px >= 0) & (px < W) & (py >= 0) & (py < H)
        ids = world.feature_ids[ok][inside]
        uv = np.column_stack([px[inside], py[inside]])
        if target_mean_feats is not None and len(ids) > target_mean_feats:
            order = np.argsort(strength[ok][inside], kind="stable")[:target_mean_feats]
            order.sort()
            ids, uv = ids[order], uv[order]
        if sigma_px > 0:
            uv = uv + sigma_px * rng.standard_normal(uv.shape)
        frames.append((t, list(zip(ids.tolist(), uv))))
    return frames


def make_world(groups, seed) -> WorldMap:
    """Feature layout from group specs.

    Groups: {"kind": "box"|"cylinder"|"ring-wall", "count": n, ...geometry}.
    """
    rng = np.random.default_rng(seed)
    pts = []
    for g in groups:
        n = g["count"]
        if g["kind"] == "box":
            lo = np.asarray(g["min"], dtype=float)
            hi = np.asarray(g["max"], dtype=float)
            pts.append(rng.uniform(lo, hi, size=(n, 3)))
        elif g["kind"] == "cylinder":
            c = np.asarray(g["center"], dtype=float)
            r = rng.uniform(0, g["radius"], n) ** 0.5 * math.sqrt(g["radius"])
            th = rng.uniform(0, 2 * math.pi, n)
            z = rng.uniform(g["z_min"], g["z_max"], n)
            pts.append(np.column_stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th), z]))
        elif g["kind"] == "ring-wall":
            c = np.asarray(g["center"], dtype=float)
            th = rng.uniform(0, 2 * math.pi, n)
            r = g["radius"] + rng.uniform(-g.get("thickness", 0.1), g.get("thickness", 0.1), n)
            z = rng.uniform(g["z_min"], g["z_max"], n)
            pts.append(np.column_stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th), z]))
        else:
            raise ValueError(f"unknown world group kind {g['kind']!r}")
    positions = np.vstack(pts)
    return WorldMap(np.arange(len(positions), dtype=np.int64), positions)


DEFAULT_CALIB_INTRINSICS = np.array([460.0, 460.0, 320.0, 240.0, 0.0, 0.0, 0.0, 0.0])


def default_calibration() -> CalibrationState:
    return CalibrationState(
        time_offset=0.0,
        extrinsic_rotation=so3.rot_to_quat(R_CAM_IMU),
        extrinsic_translation=np.zeros(3),
        intrinsics=DEFAULT_CALIB_INTRINSICS.copy(),
    )


@dataclass
class ScenarioConfig:
    name: str
    trajectories: list
    world_groups: list
    duration: float = 40.0
    imu_rate: float = 400.0
    cam_rate: float = 10.0
    sigma_px: float = 1.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    target_feats: int = 25
    num_slam: int = 3
    num_clones: int = 11
    image_size: tuple = (640, 480)
    world_seed_offset: int = 7777

    def to_dict(self):
        return {
            "name": self.name,
            "trajectories": [
                {"robot_id": s.robot_id, "kind": s.kind, "duration": s.duration,
                 "params": dict(s.params)}
                for s in self.trajectories
            ],
            "world_groups": [dict(g) for g in self.world_groups],
            "duration": self.duration,
            "imu_rate": self.imu_rate,
            "cam_rate": self.cam_rate,
            "sigma_px": self.sigma_px,
            "noise": {
                "gyro_white": self.noise.gyro_white,
                "gyro_walk": self.noise.gyro_walk,
                "accel_white": self.noise.accel_white,
                "accel_walk": self.noise.accel_walk,
                "gravity_mag": self.noise.gravity_mag,
            },
            "target_feats": self.target_feats,
            "num_slam": self.num_slam,
            "num_clones": self.num_clones,
            "image_size": list(self.image_size),
            "world_seed_offset": self.world_seed_offset,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            trajectories=[
                TrajectorySpec(s["robot_id"], s["kind"], s["duration"], dict(s["params"]))
                for s in d["trajectories"]
            ],
            world_groups=[dict(g) for g in d["world_groups"]],
            duration=d["duration"],
            imu_rate=d["imu_rate"],
            cam_rate=d["cam_rate"],
            sigma_px=d["sigma_px"],
            noise=NoiseParams(**d["noise"]),
            target_feats=d["target_feats"],
            num_slam=d["num_slam"],
            num_clones=d["num_clones"],
            image_size=tuple(d["image_size"]),
            world_seed_offset=d.get("world_seed_offset", 7777),
        )


@dataclass
class RobotSimData:
    robot_id: int
    trajectory: Trajectory
    imu: list
    frames: list
    bias_truth: np.ndarray


@dataclass
class SimData:
    config: ScenarioConfig
    seed: int
    world: WorldMap
    robots: dict  # robot_id -> RobotSimData
    calib: CalibrationState


def generate_scenario(config: ScenarioConfig, seed: int, zero_noise: bool = False) -> SimData:
    """Deterministic measurement generation for one Monte Carlo seed."""
    world = make_world(config.world_groups, seed + config.world_seed_offset)
    calib = default_calibration()
    robots = {}
    ss = np.random.SeedSequence(entropy=(seed, 0xC00F))
    children = ss.spawn(2 * len(config.trajectories))
    for i, spec in enumerate(config.trajectories):
        traj = build_trajectory(spec)
        imu, bias_truth = sample_imu(
            traj, config.duration, config.imu_rate, config.noise,
            children[2 * i], perfect=zero_noise,
        )
        frames = sample_bearings(
            traj, world, calib, config.duration, config.cam_rate,
            0.0 if zero_noise else config.sigma_px, children[2 * i + 1],
            image_size=config.image_size, target_mean_feats=config.target_feats,
        )
        robots[spec.robot_id] = RobotSimData(spec.robot_id, traj, imu, frames, bias_truth)
    return SimData(config, seed, world, robots, calib)


def common_view_fraction(sim: SimData) -> float:
    """Fraction of frames where a robot shares at least one feature id with
    another robot's same-index frame."""
    rids = sorted(sim.robots.keys())
    n_frames = len(sim.robots[rids[0]].frames)
    hits = 0
    total = 0
    sets = {
        rid: [set(fid for fid, _ in fr[1]) for fr in sim.robots[rid].frames] for rid in rids
    }
    for rid in rids:
        for k in range(n_frames):
            total += 1
            mine = sets[rid][k]
            if any(mine & sets[o][k] for o in rids if o != rid):
                hits += 1
    return hits / max(total, 1)


def scenario_presets() -> dict:
    """Named scenario configurations."""
    presets = {}

    # three hand-held-style robots orbiting a shared cluster; gaze sweeps away
    # periodically so common views cover roughly 4 out of 5 frames
    ar_traj = [
        TrajectorySpec(0, "circle", 40.0, dict(
            center=[0, 0, 1.2], radius=2.8, period=30.0, phase=0.0,
            z_amp=0.15, sweep_amp=1.15, sweep_period=11.0)),
        TrajectorySpec(1, "circle", 40.0, dict(
            center=[0, 0, 1.4], radius=3.2, period=37.0, phase=2.1,
            z_amp=0.2, sweep_amp=1.15, sweep_period=13.0)),
        TrajectorySpec(2, "circle", 40.0, dict(
            center=[0, 0, 1.0], radius=2.4, period=25.0, phase=4.2,
            z_amp=0.1, sweep_amp=1.15, sweep_period=9.0)),
    ]
    ar_world = [
        {"kind": "cylinder", "count": 220, "center": [0, 0, 0], "radius": 1.4,
         "z_min": 0.4, "z_max": 1.6},
        {"kind": "ring-wall", "count": 500, "center": [0, 0, 0], "radius": 7.0,
         "thickness": 0.3, "z_min": 0.2, "z_max": 2.6},
    ]
    presets["ar3"] = ScenarioConfig(
        name="ar3", trajectories=ar_traj, world_groups=ar_world,
        duration=40.0, target_feats=25, num_slam=3,
    )

    # room-scale loops, moderate co-visibility
    def room_loop(rid, cx, cy, sx, sy, period, phase, z):
        wp = [
            [cx - sx, cy - sy, z], [cx + sx, cy - sy, z * 1.2],
            [cx + sx, cy + sy, z], [cx - sx, cy + sy, z * 0.8],
            [cx - sx, cy - sy, z],
        ]
        return TrajectorySpec(rid, "waypoint-spline", 48.0,
                              dict(waypoints=wp, period=period, phase=phase))

    eth_traj = [
        room_loop(0, 0.0, 0.0, 3.0, 2.0, 24.0, 0.0, 1.4),
        room_loop(1, 0.3, 0.3, 2.5, 2.4, 30.0, 11.0, 1.1),
        room_loop(2, -0.3, -0.2, 2.8, 2.2, 27.0, 19.0, 1.7),
    ]
    eth_world = [
        {"kind": "ring-wall", "count": 900, "center": [0, 0, 0], "radius": 5.4,
         "thickness": 0.25, "z_min": 0.0, "z_max": 3.0},
        {"kind": "box", "count": 250, "min": [-4.5, -4.5, 0.0], "max": [4.5, 4.5, 0.4]},
    ]
    presets["eth3"] = ScenarioConfig(
        name="eth3", trajectories=eth_traj, world_groups=eth_world,
        duration=48.0, target_feats=50, num_slam=5,
    )

    # shared circuit, robots phase-separated so live common views are near
    # zero; every lap revisits places the others (and the robot itself) saw
    circuit = [
        TrajectorySpec(r, "circle", 120.0, dict(
            center=[0, 0, 1.3], radius=7.0, period=60.0,
            phase=r * 2.0 * math.pi / 3.0, gaze_offset=-math.pi / 2.0 - 0.45,
            z_amp=0.35, z_period=7.0, sweep_amp=0.3, sweep_period=5.0 + 0.7 * r))
        for r in range(3)
    ]
    revisit_world = [
        {"kind": "ring-wall", "count": 1400, "center": [0, 0, 0], "radius": 9.5,
         "thickness": 0.3, "z_min": 0.2, "z_max": 2.8},
    ]
    presets["disjoint-then-revisit"] = ScenarioConfig(
        name="disjoint-then-revisit", trajectories=circuit,
        world_groups=revisit_world, duration=120.0, target_feats=25, num_slam=3,
    )
    return presets


def ground_truth_to_csv(sim: SimData, robot_id: int, path):
    """Dump per-frame true poses as ``t, x, y, z, qx, qy, qz, qw``."""
    data = sim.robots[robot_id]
    with open(path, "w") as f:
        f.write("t,x,y,z,qx,qy,qz,qw\n")
        for t, _ in data.frames:
            q, p = data.trajectory.pose(t)
            f.write(f"{t:.9f},{p[0]:.9f},{p[1]:.9f},{p[2]:.9f},"
                    f"{q[0]:.12f},{q[1]:.12f},{q[2]:.12f},{q[3]:.12f}\n")


def bearings_to_csv(sim: SimData, robot_id: int, path):
    """Dump bearing observations as ``t, feature_id, u, v`` rows."""
    with open(path, "w") as f:
        f.write("t,feature_id,u,v\n")
        for t, obs in sim.robots[robot_id].frames:
            for fid, uv in obs:
                f.write(f"{t:.9f},{fid},{uv[0]:.6f},{uv[1]:.6f}\n")
