"""Per-robot estimator agents and the joint (centralized) estimator.

A RobotAgent owns exactly one robot's state and covariance. Per camera frame
it propagates through the buffered IMU samples, manages the clone window and
the landmark map, runs the update paths its variant enables, and publishes a
state packet. Snapshots received from peers are immutable; all cross-robot
fusion goes through the CI update paths.

Track policy: a feature's observations accumulate while it stays in view;
when it is lost or spans the whole window it is "due" and consumed by exactly
one update (common-VIO with live peers, historical loop closure, or plain
MSCKF, in that order of preference). Landmarks are promoted from mature
tracks up to capacity, updated every frame they are seen, and evicted after a
full window out of view (smallest id first on ties).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import centralized as ce
from .association import (
    ArchiveEntry,
    HistoricalArchive,
    KeyframeSummary,
    MatchDatabase,
    reprojection_gate,
)
from .comms import StatePacket
from .propagation import NoiseParams, propagate_window
from .state import (
    CalibrationState,
    CloneWindow,
    InertialState,
    RobotState,
    SlamMap,
    apply_correction,
    augment_clone,
    marginalize_clone,
    remove_slam_feature,
)
from .updates import (
    ArchiveHit,
    FilterConfig,
    Participant,
    UpdateResult,
    common_vio_update,
    delayed_feature_init,
    fej_slam_update,
    msckf_update,
    slam_constraint_update,
    slam_grab_update,
)
from .vision import BearingObservation, FeatureTrack


@dataclass
class VariantFlags:
    use_slam: bool = True
    use_common_vio: bool = False
    use_common_slam: bool = False
    use_constraint: bool = False
    use_history: bool = False
    centralized: bool = False


VARIANTS = {
    "indp": VariantFlags(use_slam=False),
    "indp-slam": VariantFlags(),
    "ce-cmsckf": VariantFlags(use_common_vio=True, centralized=True),
    "ce-cmsckf-cslam": VariantFlags(use_common_vio=True, use_common_slam=True,
                                    centralized=True),
    "dc-cmsckf": VariantFlags(use_common_vio=True),
    "dc-cmsckf-cslam": VariantFlags(use_common_vio=True, use_common_slam=True),
    "dc-full-window": VariantFlags(use_common_vio=True, use_common_slam=True,
                                   use_constraint=True),
    "dc-full-history": VariantFlags(use_common_vio=True, use_common_slam=True,
                                    use_constraint=True, use_history=True),
}


@dataclass
class AgentConfig:
    window_size: int = 11
    slam_capacity: int = 3
    filter: FilterConfig = field(default_factory=FilterConfig)
    noise: NoiseParams = field(default_factory=NoiseParams)
    flags: VariantFlags = field(default_factory=VariantFlags)
    keyframe_period: float = 1.0  # seconds between stored historical keyframes
    miss_rate: float = 0.0
    false_match_rate: float = 0.0
    geometry_gate_px: float | None = None
    max_vio_per_update: int = 30
    max_hist_windows_per_frame: int = 3
    cam_period: float = 0.1


@dataclass
class FrameRecord:
    timestamp: float
    orientation: np.ndarray
    position: np.ndarray
    cov_theta: np.ndarray
    cov_pos: np.ndarray


@dataclass
class UpdateLogRow:
    timestamp: float
    robot_id: int
    kind: str
    rows: int
    chi2: float
    runtime_us: float


class TrackTable:
    """Own live observations grouped per feature, pruned to the clone window."""

    def __init__(self):
        self.tracks: dict[int, FeatureTrack] = {}
        self.last_seen: dict[int, float] = {}

    def ingest(self, robot_id, t, frame_obs, sigma):
        for fid, uv in frame_obs:
            fid = int(fid)
            tr = self.tracks.get(fid)
            if tr is None:
                tr = FeatureTrack(fid)
                self.tracks[fid] = tr
            tr.observations.append(BearingObservation(robot_id, fid, t, np.asarray(uv), sigma))
            self.last_seen[fid] = t

    def prune_to_window(self, clone_times):
        alive = set(clone_times)
        for tr in self.tracks.values():
            tr.observations = [o for o in tr.observations if o.frame_timestamp in alive]

    def drop(self, fid):
        self.tracks.pop(fid, None)


class RobotAgent:
    def __init__(self, robot_id: int, initial: RobotState, cov0: np.ndarray,
                 config: AgentConfig, world_positions=None, assoc_seed=0):
        self.robot_id = robot_id
        self.state = initial
        self.cov = cov0
        self.config = config
        self.tracks = TrackTable()
        self.db = MatchDatabase(robot_id)
        self.archives: dict[int, HistoricalArchive] = {robot_id: HistoricalArchive(robot_id)}
        self.peer_latest: dict[int, StatePacket] = {}
        self.slam_last_obs: dict[int, float] = {}
        self.slam_grabbed: dict = {}  # (rid, fid_other) -> last obs timestamp used
        self.hist_done: set = set()  # (own fid, rid, window_index) pairs already used
        self._window_track_buf: dict = {}  # rid -> {fid: {t: obs}} pending archive
        self.update_log: list[UpdateLogRow] = []
        self.records: list[FrameRecord] = []
        self.frame_index = 0
        self.next_archive_start = None
        self.world_positions = world_positions
        self._assoc_seed = assoc_seed
        self.step_time_total = 0.0
        self.imu_buffer_tail = None

    # ------------------------------------------------------------------
    def ingest_packets(self, packets):
        for pkt in packets:
            self.peer_latest[pkt.robot_id] = pkt
            if pkt.keyframe is not None:
                self.db.ingest_remote_tracks(pkt.keyframe)
                self._maybe_archive_peer(pkt)

    def _buffer_window_tracks(self, rid, tracks):
        """Accumulate observations so a window entry also covers tracks that
        died before the checkpoint instant."""
        buf = self._window_track_buf.setdefault(rid, {})
        for tr in tracks:
            seen = buf.setdefault(tr.feature_id, {})
            for o in tr.observations:
                seen[o.frame_timestamp] = o

    def _flush_window_tracks(self, rid, clone_times):
        buf = self._window_track_buf.get(rid, {})
        alive = set(clone_times)
        out = {}
        for fid, seen in buf.items():
            obs = [o for t, o in sorted(seen.items()) if t in alive]
            if obs:
                out[fid] = obs
        self._window_track_buf[rid] = {}
        return out

    def _maybe_archive_peer(self, pkt: StatePacket):
        if not self.config.flags.use_history:
            return
        self._buffer_window_tracks(pkt.robot_id, pkt.tracks)
        arc = self.archives.setdefault(pkt.robot_id, HistoricalArchive(pkt.robot_id))
        clone_times = pkt.state.clones.timestamps()
        if not clone_times:
            return
        t0, t1 = clone_times[0], clone_times[-1]
        if arc.entries and t0 < arc.entries[-1].t_end - 1e-9:
            return  # wait until the peer's window has fully slid past
        tracks = self._flush_window_tracks(pkt.robot_id, clone_times)
        arc.add_entry(ArchiveEntry(pkt.robot_id, len(arc.entries), t0, t1,
                                   pkt.state, pkt.cov, tracks,
                                   [pkt.keyframe] if pkt.keyframe else []))

    def _maybe_archive_self(self, t):
        if not self.config.flags.use_history:
            return
        self._buffer_window_tracks(
            self.robot_id,
            [FeatureTrack(fid, list(tr.observations))
             for fid, tr in self.tracks.tracks.items()],
        )
        arc = self.archives[self.robot_id]
        clone_times = self.state.clones.timestamps()
        if not clone_times:
            return
        t0, t1 = clone_times[0], clone_times[-1]
        if arc.entries and t0 < arc.entries[-1].t_end - 1e-9:
            return
        tracks = self._flush_window_tracks(self.robot_id, clone_times)
        kf = KeyframeSummary(self.robot_id, t, [])
        arc.add_entry(ArchiveEntry(self.robot_id, len(arc.entries), t0, t1,
                                   self.state.copy(), self.cov.copy(), tracks, [kf]))

    # ------------------------------------------------------------------
    def step(self, frame_t: float, imu_chunk, frame_obs):
        """One camera-frame cycle; returns the packet to publish (or None)."""
        cfg = self.config
        t_begin = time.perf_counter()

        if len(imu_chunk) >= 2:
            self.state, self.cov = propagate_window(self.state, self.cov, imu_chunk,
                                                    cfg.noise)
        self.state.timestamp = frame_t

        # clone management: evict the oldest when full, then clone this frame
        if len(self.state.clones) >= cfg.window_size:
            self.state, self.cov = marginalize_clone(self.state, self.cov, 0)
        self.state, self.cov = augment_clone(self.state, self.cov, frame_t)

        self.tracks.ingest(self.robot_id, frame_t, frame_obs, cfg.filter.sigma_px)
        self.tracks.prune_to_window(self.state.clones.timestamps())
        current_ids = {int(fid) for fid, _ in frame_obs}

        self._evict_stale_landmarks(frame_t)
        due = self._due_tracks(frame_t, current_ids)

        live_matches, hist_matches = self._query_matches(frame_t, frame_obs, due,
                                                         current_ids)

        promoted = self._promote_landmarks(frame_t, due, current_ids)
        for fid in promoted:
            due.pop(fid, None)

        # update order: independent MSCKF, independent landmarks, common VIO,
        # common landmarks, historical
        common_due = {}
        hist_due = {}
        plain_due = {}
        for fid, tr in due.items():
            if cfg.flags.use_common_vio and fid in live_matches:
                common_due[fid] = tr
            elif cfg.flags.use_history and fid in hist_matches:
                hist_due[fid] = tr
            else:
                plain_due[fid] = tr

        if plain_due:
            batch = list(plain_due.values())[: cfg.max_vio_per_update]
            self.state, self.cov, results = msckf_update(self.state, self.cov, batch,
                                                         cfg.filter)
            self._log(frame_t, results)
        slam_obs = {
            fid: [o for o in self.tracks.tracks[fid].observations
                  if o.frame_timestamp == frame_t]
            for fid in current_ids
            if self.state.slam.get(fid) is not None and fid in self.tracks.tracks
        }
        if cfg.flags.use_slam and slam_obs:
            self.state, self.cov, results = fej_slam_update(self.state, self.cov,
                                                            slam_obs, cfg.filter)
            self._log(frame_t, results)

        if cfg.flags.use_common_vio:
            for fid, tr in common_due.items():
                parts = self._live_participants(fid, live_matches[fid])
                if not parts:
                    continue
                self.state, self.cov, results = common_vio_update(
                    self.state, self.cov, tr.observations, parts, cfg.filter)
                self._log(frame_t, results)

        if cfg.flags.use_common_slam:
            self._common_slam_updates(frame_t, current_ids, live_matches)

        if cfg.flags.use_history:
            self._historical_updates(frame_t, hist_due, hist_matches, current_ids)

        for fid in list(due.keys()):
            self.tracks.drop(fid)

        self.step_time_total += time.perf_counter() - t_begin
        self._record(frame_t)

        pkt = self._publish(frame_t, frame_obs)
        self._maybe_archive_self(frame_t)
        self.frame_index += 1
        return pkt

    # ------------------------------------------------------------------
    def _due_tracks(self, frame_t, current_ids):
        cfg = self.config
        due = {}
        for fid, tr in self.tracks.tracks.items():
            if self.state.slam.get(fid) is not None:
                continue
            n = len(tr.observations)
            if fid not in current_ids and n >= cfg.filter.min_obs_msckf:
                due[fid] = tr
            elif n >= cfg.window_size:
                due[fid] = tr
        return due

    def _promote_landmarks(self, frame_t, due, current_ids):
        cfg = self.config
        promoted = []
        if not cfg.flags.use_slam:
            return promoted
        for fid, tr in sorted(due.items()):
            if fid not in current_ids or len(tr.observations) < cfg.window_size:
                continue
            if len(self.state.slam) >= self.state.slam.capacity:
                break
            out = delayed_feature_init(self.state, self.cov, tr, cfg.filter)
            if out is None:
                continue
            self.state, self.cov, results = out
            self._log(frame_t, results)
            self.slam_last_obs[fid] = frame_t
            promoted.append(fid)
            self.tracks.drop(fid)
        return promoted

    def _evict_stale_landmarks(self, frame_t):
        span = self.config.window_size * self.config.cam_period
        stale = sorted(
            f.feature_id
            for f in self.state.slam
            if frame_t - self.slam_last_obs.get(f.feature_id, frame_t) >= span - 1e-9
        )
        for fid in stale:
            self.state, self.cov = remove_slam_feature(self.state, self.cov, fid)
            self.slam_last_obs.pop(fid, None)

    def _query_matches(self, frame_t, frame_obs, due, current_ids):
        cfg = self.config
        live, hist = {}, {}
        needs_live = cfg.flags.use_common_vio or cfg.flags.use_common_slam
        if not (needs_live or cfg.flags.use_history):
            return live, hist
        query_ids = set(due.keys()) | {
            f.feature_id for f in self.state.slam
            if f.feature_id in current_ids
        }
        if not query_ids:
            return live, hist
        uv_by_id = {int(fid): uv for fid, uv in frame_obs}
        synth = (frame_t, [(fid, uv_by_id.get(fid, np.zeros(2))) for fid in sorted(query_ids)])
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(self._assoc_seed, self.robot_id,
                                            self.frame_index)))
        gate = None
        if cfg.geometry_gate_px is not None and self.world_positions is not None:
            gate = reprojection_gate(self.world_positions, cfg.geometry_gate_px, 1.0, rng)
        span = cfg.window_size * cfg.cam_period + 0.5 * cfg.cam_period
        if needs_live:
            res = self.db.query_matches(synth, "live", cfg.miss_rate,
                                        cfg.false_match_rate, rng, live_span=span,
                                        geometry_gate=gate)
            for m in res:
                live.setdefault(m.own_feature_id, []).append(m)
        if cfg.flags.use_history:
            res = self.db.query_matches(synth, "historical", cfg.miss_rate,
                                        cfg.false_match_rate, rng, live_span=span,
                                        geometry_gate=gate)
            for m in res:
                hist.setdefault(m.own_feature_id, []).append(m)
        return live, hist

    def _live_participants(self, fid, matches):
        parts = []
        for m in matches:
            pkt = self.peer_latest.get(m.other_robot_id)
            if pkt is None:
                continue
            obs = None
            for tr in pkt.tracks:
                if tr.feature_id == m.other_feature_id:
                    obs = tr.observations
                    break
            if not obs:
                continue
            parts.append(Participant(key=pkt.robot_id, state=pkt.state, cov=pkt.cov,
                                     observations=obs))
        return parts

    def _common_slam_updates(self, frame_t, current_ids, live_matches):
        cfg = self.config
        for f in list(self.state.slam):
            fid = f.feature_id
            if fid not in current_ids or fid not in live_matches:
                continue
            for m in live_matches[fid]:
                pkt = self.peer_latest.get(m.other_robot_id)
                if pkt is None:
                    continue
                part = Participant(key=pkt.robot_id, state=pkt.state, cov=pkt.cov)
                other_is_slam = pkt.state.slam.get(m.other_feature_id) is not None
                if cfg.flags.use_constraint and other_is_slam:
                    self.state, self.cov, res = slam_constraint_update(
                        self.state, self.cov, part, fid, m.other_feature_id, cfg.filter)
                    self._log(frame_t, [res])
                else:
                    obs = self._new_remote_obs(pkt, m.other_feature_id)
                    if not obs:
                        continue
                    self.state, self.cov, res = slam_grab_update(
                        self.state, self.cov, fid, part, obs, cfg.filter)
                    self._log(frame_t, [res])

    def _new_remote_obs(self, pkt, fid_other):
        key = (pkt.robot_id, fid_other)
        t_last = self.slam_grabbed.get(key, -1e18)
        obs = []
        for tr in pkt.tracks:
            if tr.feature_id == fid_other:
                obs = [o for o in tr.observations if o.frame_timestamp > t_last + 1e-9]
                break
        if obs:
            self.slam_grabbed[key] = max(o.frame_timestamp for o in obs)
        return obs

    def _historical_updates(self, frame_t, hist_due, hist_matches, current_ids):
        cfg = self.config
        hits = []
        used_windows = 0
        # landmark loop closures first (cheap constraints), then due tracks
        for f in list(self.state.slam):
            fid = f.feature_id
            if fid not in hist_matches or fid not in current_ids:
                continue
            for m in hist_matches[fid]:
                entry = self._find_archive_window(m)
                if entry is None:
                    continue
                key = (fid, m.other_robot_id, entry.window_index)
                if key in self.hist_done:
                    continue
                part = Participant(key=(m.other_robot_id, entry.window_index),
                                   state=entry.state, cov=entry.cov)
                archived_slam = entry.state.slam.get(m.other_feature_id) is not None
                if cfg.flags.use_constraint and archived_slam:
                    hits.append(ArchiveHit(part, constraint_pair=(fid, m.other_feature_id)))
                    self.hist_done.add(key)
                else:
                    obs = entry.tracks.get(m.other_feature_id)
                    if obs:
                        self.state, self.cov, res = slam_grab_update(
                            self.state, self.cov, fid, part, obs, cfg.filter,
                            kind="hist-slam-grab")
                        self._log(frame_t, [res])
                        self.hist_done.add(key)
                used_windows += 1
                if used_windows >= cfg.max_hist_windows_per_frame:
                    break
        for fid, tr in hist_due.items():
            if used_windows >= cfg.max_hist_windows_per_frame:
                break
            for m in hist_matches.get(fid, []):
                entry = self._find_archive_window(m)
                if entry is None:
                    continue
                obs = entry.tracks.get(m.other_feature_id)
                if not obs:
                    continue
                key = (fid, m.other_robot_id, entry.window_index)
                if key in self.hist_done:
                    continue
                part = Participant(key=(m.other_robot_id, entry.window_index),
                                   state=entry.state, cov=entry.cov,
                                   observations=obs)
                hits.append(ArchiveHit(part, own_observations=tr.observations))
                self.hist_done.add(key)
                used_windows += 1
                break
        if hits:
            from .updates import historical_update

            self.state, self.cov, results = historical_update(self.state, self.cov,
                                                              hits, cfg.filter)
            self._log(frame_t, results)

    def _find_archive_window(self, match):
        arc = self.archives.get(match.other_robot_id)
        if arc is None:
            return None
        hits = arc.lookup([match.other_timestamp])
        return hits[0] if hits else None

    # ------------------------------------------------------------------
    def _publish(self, frame_t, frame_obs):
        cfg = self.config
        needs_comm = (cfg.flags.use_common_vio or cfg.flags.use_common_slam
                      or cfg.flags.use_history)
        if not needs_comm:
            return None
        # summaries go out every frame so peers can match live tracks; the
        # keyframe period only throttles what the historical archive retains
        kf = KeyframeSummary(self.robot_id, frame_t,
                             [(int(fid), np.asarray(uv)) for fid, uv in frame_obs])
        tracks = [FeatureTrack(fid, list(tr.observations))
                  for fid, tr in self.tracks.tracks.items() if tr.observations]
        # landmarks travel in the state; publish their supporting tracks too
        return StatePacket(self.robot_id, frame_t, self.state.copy(), self.cov.copy(),
                           tracks, kf)

    def _record(self, frame_t):
        from .state import ErrorIndex

        idx = ErrorIndex(self.state)
        self.records.append(FrameRecord(
            frame_t,
            self.state.imu.orientation.copy(),
            self.state.imu.position.copy(),
            self.cov[idx.theta, idx.theta].copy(),
            self.cov[idx.pos, idx.pos].copy(),
        ))

    def _log(self, frame_t, results):
        for r in results:
            if isinstance(r, UpdateResult):
                self.update_log.append(UpdateLogRow(frame_t, self.robot_id, r.kind,
                                                    r.rows, r.chi2, r.runtime_us))


class CentralizedEstimator:
    """Joint estimator over all robots: same track policies, exact joint updates."""

    def __init__(self, initials: dict, covs: dict, config: AgentConfig,
                 world_positions=None, assoc_seed=0):
        self.config = config
        self.joint = ce.JointState([s for s in initials.values()])
        self.cov = ce.joint_initial_covariance(self.joint, covs)
        self.tracks = {rid: TrackTable() for rid in self.joint.order}
        self.dbs = {rid: MatchDatabase(rid) for rid in self.joint.order}
        self.slam_last_obs: dict = {}
        self.slam_grabbed: dict = {}
        self.update_log: list[UpdateLogRow] = []
        self.records: dict = {rid: [] for rid in self.joint.order}
        self.frame_index = 0
        self.world_positions = world_positions
        self._assoc_seed = assoc_seed
        self.step_time_total = 0.0

    def step(self, frame_t: float, imu_chunks: dict, frame_obs: dict):
        cfg = self.config
        t_begin = time.perf_counter()
        for rid in self.joint.order:
            chunk = imu_chunks[rid]
            if len(chunk) >= 2:
                self.joint, self.cov = ce.joint_propagate(self.joint, self.cov, rid,
                                                          chunk, cfg.noise)
            st = self.joint.states[rid]
            if len(st.clones) >= cfg.window_size:
                self.joint, self.cov = ce.joint_marginalize_clone(self.joint, self.cov,
                                                                  rid, 0)
            self.joint, self.cov = ce.joint_augment_clone(self.joint, self.cov, rid,
                                                          frame_t)
            self.tracks[rid].ingest(rid, frame_t, frame_obs[rid], cfg.filter.sigma_px)
            self.tracks[rid].prune_to_window(
                self.joint.states[rid].clones.timestamps())

        current_ids = {rid: {int(f) for f, _ in frame_obs[rid]} for rid in self.joint.order}
        self._evict_stale_landmarks(frame_t)

        # keyframe ingestion mirrors the distributed schedule
        for rid in self.joint.order:
            kf = KeyframeSummary(rid, frame_t,
                                 [(int(f), np.asarray(uv)) for f, uv in frame_obs[rid]])
            for other in self.joint.order:
                if other != rid:
                    self.dbs[other].ingest_remote_tracks(kf)

        for rid in self.joint.order:
            due = self._due_tracks(rid, frame_t, current_ids[rid])
            live_matches = self._query_matches(rid, frame_t, frame_obs[rid], due,
                                               current_ids[rid])
            promoted = self._promote_landmarks(rid, frame_t, due, current_ids[rid])
            for fid in promoted:
                due.pop(fid, None)
            common_due = {}
            plain_due = {}
            for fid, tr in due.items():
                if cfg.flags.use_common_vio and fid in live_matches:
                    common_due[fid] = tr
                else:
                    plain_due[fid] = tr
            self._msckf(rid, frame_t, list(plain_due.values())[: cfg.max_vio_per_update])
            if cfg.flags.use_slam:
                self._slam_updates(rid, frame_t, current_ids[rid])
            if cfg.flags.use_common_vio:
                for fid, tr in common_due.items():
                    self._common_vio(rid, frame_t, fid, tr, live_matches[fid])
            if cfg.flags.use_common_slam:
                self._common_slam(rid, frame_t, current_ids[rid], live_matches)
            for fid in due:
                self.tracks[rid].drop(fid)

        self.step_time_total += time.perf_counter() - t_begin
        for rid in self.joint.order:
            self._record(rid, frame_t)
        self.frame_index += 1

    # ------------------------------------------------------------------
    def _due_tracks(self, rid, frame_t, current):
        cfg = self.config
        due = {}
        for fid, tr in self.tracks[rid].tracks.items():
            if self.joint.states[rid].slam.get(fid) is not None:
                continue
            n = len(tr.observations)
            if fid not in current and n >= cfg.filter.min_obs_msckf:
                due[fid] = tr
            elif n >= cfg.window_size:
                due[fid] = tr
        return due

    def _query_matches(self, rid, frame_t, obs, due, current):
        cfg = self.config
        if not (cfg.flags.use_common_vio or cfg.flags.use_common_slam):
            return {}
        query_ids = set(due.keys()) | {
            f.feature_id for f in self.joint.states[rid].slam if f.feature_id in current
        }
        if not query_ids:
            return {}
        uv_by_id = {int(fid): uv for fid, uv in obs}
        synth = (frame_t, [(fid, uv_by_id.get(fid, np.zeros(2))) for fid in sorted(query_ids)])
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(self._assoc_seed, rid, self.frame_index)))
        gate = None
        if cfg.geometry_gate_px is not None and self.world_positions is not None:
            gate = reprojection_gate(self.world_positions, cfg.geometry_gate_px, 1.0, rng)
        span = cfg.window_size * cfg.cam_period + 0.5 * cfg.cam_period
        res = self.dbs[rid].query_matches(synth, "live", cfg.miss_rate,
                                          cfg.false_match_rate, rng, live_span=span,
                                          geometry_gate=gate)
        live = {}
        for m in res:
            live.setdefault(m.own_feature_id, []).append(m)
        return live

    def _promote_landmarks(self, rid, frame_t, due, current):
        cfg = self.config
        promoted = []
        if not cfg.flags.use_slam:
            return promoted
        st = self.joint.states[rid]
        offs, _ = self.joint.offsets()
        for fid, tr in sorted(due.items()):
            if fid not in current or len(tr.observations) < cfg.window_size:
                continue
            if len(self.joint.states[rid].slam) >= self.joint.states[rid].slam.capacity:
                break
            out = self._delayed_init_joint(rid, tr)
            if out is None:
                continue
            self.slam_last_obs[(rid, fid)] = frame_t
            promoted.append(fid)
            self.tracks[rid].drop(fid)
        return promoted

    def _delayed_init_joint(self, rid, track):
        """Delayed initialization with cross terms over the whole joint state."""
        from .state import ErrorIndex, symmetrize
        from .updates import LinearizedSystem, _triangulated_system

        cfg = self.config
        st = self.joint.states[rid]
        built = _triangulated_system(st, track, cfg.filter)
        if built is None:
            return None
        sys, p_f = built
        m = sys.rows
        q, r = np.linalg.qr(sys.feature, mode="complete")
        if abs(r[2, 2]) < 1e-10 * max(1.0, abs(r[0, 0])):
            return None
        offs, dim = self.joint.offsets()
        o = offs[rid]
        d = st.error_dim()
        Hg = np.zeros((m, dim))
        Hg[:, o:o + d] = sys.blocks[rid]
        Q1 = q[:, :3]
        U = r[:3, :3]
        H1 = Q1.T @ Hg
        r1 = Q1.T @ sys.residual
        R1 = Q1.T @ sys.noise_cov @ Q1
        Uinv = np.linalg.inv(U)
        prior = symmetrize(Uinv @ (H1 @ self.cov @ H1.T + R1) @ Uinv.T)
        cross = -Uinv @ H1 @ self.cov
        p_init = p_f + Uinv @ r1
        self.joint, self.cov = ce.joint_init_slam_feature(
            self.joint, self.cov, rid, track.feature_id, p_init, prior, cross)
        if m > 3:
            Q2 = q[:, 3:]
            offs2, dim2 = self.joint.offsets()
            H2 = np.zeros((m - 3, self.joint.states[rid].error_dim()))
            H2[:, :d] = Q2.T @ sys.blocks[rid]
            sys2 = LinearizedSystem(
                residual=Q2.T @ sys.residual,
                blocks={rid: H2},
                noise_cov=symmetrize(Q2.T @ sys.noise_cov @ Q2),
            )
            self.joint, self.cov, res = ce.centralized_update(self.joint, self.cov,
                                                              sys2, cfg.filter,
                                                              kind="slam-init")
            self._log(res, 0.0)
        return True

    def _msckf(self, rid, frame_t, tracks):
        from .updates import (LinearizedSystem, RankError, _triangulated_system,
                              chi2_threshold, kalman_core, nullspace_project)

        cfg = self.config
        if not tracks:
            return
        st = self.joint.states[rid]
        offs, dim = self.joint.offsets()
        o = offs[rid]
        stacked = []
        for track in tracks:
            built = _triangulated_system(st, track, cfg.filter)
            if built is None:
                continue
            sys, _ = built
            try:
                proj = nullspace_project(sys)
            except RankError:
                continue
            Hg = np.zeros((proj.rows, dim))
            Hg[:, o:o + st.error_dim()] = proj.blocks[rid]
            try:
                _, _, gamma = kalman_core(self.cov, Hg, proj.residual, proj.noise_cov,
                                          cfg.filter.cond_max)
            except RankError:
                continue
            if gamma > chi2_threshold(proj.rows, cfg.filter.chi2_level):
                continue
            stacked.append((proj.residual, Hg, proj.noise_cov))
        if not stacked:
            return
        from .updates import blkdiag

        sys = LinearizedSystem(
            residual=np.concatenate([s[0] for s in stacked]),
            blocks={rid: np.vstack([s[1][:, o:o + st.error_dim()] for s in stacked])},
            noise_cov=blkdiag([s[2] for s in stacked]),
        )
        self.joint, self.cov, res = ce.centralized_update(self.joint, self.cov, sys,
                                                          cfg.filter, gate=False,
                                                          kind="msckf")
        self._log(res, frame_t)

    def _slam_updates(self, rid, frame_t, current):
        from .state import ErrorIndex
        from .updates import LinearizedSystem
        from .vision import measurement_jacobians

        cfg = self.config
        st = self.joint.states[rid]
        idx = ErrorIndex(st)
        rows_H, rows_r, sig = [], [], []
        for f in st.slam:
            fid = f.feature_id
            if fid not in current or fid not in self.tracks[rid].tracks:
                continue
            obs_list = [o for o in self.tracks[rid].tracks[fid].observations
                        if o.frame_timestamp == frame_t]
            for obs in obs_list:
                ci = st.clones.index_of(obs.frame_timestamp)
                if ci is None:
                    continue
                clone = st.clones.clones[ci]
                try:
                    res, H_pose, H_f, _ = measurement_jacobians(
                        clone.orientation, clone.position, st.calib, f.position,
                        obs.uv, lin_feature=f.first_estimate)
                except ValueError:
                    continue
                H = np.zeros((2, idx.dim))
                H[:, idx.clone(clone.timestamp)] = H_pose
                H[:, idx.feat(fid)] = H_f
                rows_H.append(H)
                rows_r.append(res)
                sig.extend([obs.noise_sigma] * 2)
            self.slam_last_obs[(rid, fid)] = frame_t
        if not rows_H:
            return
        sys = LinearizedSystem(
            residual=np.concatenate(rows_r),
            blocks={rid: np.vstack(rows_H)},
            noise_cov=np.diag(np.square(sig)),
        )
        self.joint, self.cov, res = ce.centralized_update(self.joint, self.cov, sys,
                                                          cfg.filter, kind="slam")
        self._log(res, frame_t)

    def _common_vio(self, rid, frame_t, fid, track, matches):
        from .updates import (LinearizedSystem, RankError, blkdiag, feature_rows,
                              nullspace_project, observation_clone_time)
        from .vision import TriangulationError, triangulate

        cfg = self.config
        st_i = self.joint.states[rid]
        obs_all, poses_all = [], []
        for o in track.observations:
            ci = st_i.clones.index_of(observation_clone_time(o, st_i.calib))
            if ci is None:
                continue
            c = st_i.clones.clones[ci]
            obs_all.append(o)
            poses_all.append((c.orientation, c.position))
        systems = []
        n_own = len(obs_all)
        others = []
        for m in matches:
            o_rid = m.other_robot_id
            tr_o = self.tracks[o_rid].tracks.get(m.other_feature_id)
            if tr_o is None:
                continue
            st_o = self.joint.states[o_rid]
            sub = []
            for o in tr_o.observations:
                ci = st_o.clones.index_of(observation_clone_time(o, st_o.calib))
                if ci is None:
                    continue
                c = st_o.clones.clones[ci]
                sub.append(o)
                obs_all.append(o)
                poses_all.append((c.orientation, c.position))
            if sub:
                others.append((o_rid, sub))
        if n_own < 1 or len(obs_all) < 2 or not others:
            return
        try:
            p_f, _ = triangulate(obs_all, poses_all, st_i.calib)
        except TriangulationError:
            return
        own_sys = feature_rows(st_i, track.observations, p_f, config=cfg.filter)
        if own_sys is None:
            return
        parts = [(rid, own_sys)]
        for o_rid, sub in others:
            s = feature_rows(self.joint.states[o_rid], sub, p_f, config=cfg.filter)
            if s is not None:
                parts.append((o_rid, s))
        if len(parts) == 1:
            return
        m_total = sum(s.rows for _, s in parts)
        resid = np.concatenate([s.residual for _, s in parts])
        feat = np.vstack([s.feature for _, s in parts])
        noise = blkdiag([s.noise_cov for _, s in parts])
        blocks = {}
        off = 0
        for key, s in parts:
            Hk = s.blocks[key]
            H = blocks.get(key)
            if H is None:
                H = np.zeros((m_total, Hk.shape[1]))
            H[off:off + s.rows] = Hk
            blocks[key] = H
            off += s.rows
        stacked = LinearizedSystem(residual=resid, blocks=blocks, noise_cov=noise,
                                   feature=feat)
        if stacked.rows < 4:
            return
        try:
            proj = nullspace_project(stacked)
        except RankError:
            return
        self.joint, self.cov, res = ce.centralized_update(self.joint, self.cov, proj,
                                                          self.config.filter,
                                                          kind="common-vio")
        self._log(res, frame_t)

    def _common_slam(self, rid, frame_t, current, live_matches):
        from .state import ErrorIndex
        from .updates import LinearizedSystem
        from .vision import measurement_jacobians

        cfg = self.config
        st_i = self.joint.states[rid]
        for f in list(st_i.slam):
            fid = f.feature_id
            if fid not in current or fid not in live_matches:
                continue
            for m in live_matches[fid]:
                o_rid = m.other_robot_id
                st_o = self.joint.states[o_rid]
                tr_o = self.tracks[o_rid].tracks.get(m.other_feature_id)
                if tr_o is None:
                    continue
                key = (rid, o_rid, m.other_feature_id)
                t_last = self.slam_grabbed.get(key, -1e18)
                obs = [o for o in tr_o.observations if o.frame_timestamp > t_last + 1e-9]
                if not obs:
                    continue
                self.slam_grabbed[key] = max(o.frame_timestamp for o in obs)
                idx_i = ErrorIndex(st_i)
                idx_o = ErrorIndex(st_o)
                rows_i, rows_o, rows_r, sig = [], [], [], []
                for o in obs:
                    ci = st_o.clones.index_of(o.frame_timestamp)
                    if ci is None:
                        continue
                    clone = st_o.clones.clones[ci]
                    try:
                        res, H_pose, H_f, _ = measurement_jacobians(
                            clone.orientation, clone.position, st_o.calib,
                            f.position, o.uv, lin_feature=f.first_estimate)
                    except ValueError:
                        continue
                    H_i = np.zeros((2, idx_i.dim))
                    H_i[:, idx_i.feat(fid)] = H_f
                    H_o = np.zeros((2, idx_o.dim))
                    H_o[:, idx_o.clone(clone.timestamp)] = H_pose
                    rows_i.append(H_i)
                    rows_o.append(H_o)
                    rows_r.append(res)
                    sig.extend([o.noise_sigma] * 2)
                if not rows_i:
                    continue
                sys = LinearizedSystem(
                    residual=np.concatenate(rows_r),
                    blocks={rid: np.vstack(rows_i), o_rid: np.vstack(rows_o)},
                    noise_cov=np.diag(np.square(sig)),
                )
                self.joint, self.cov, res = ce.centralized_update(
                    self.joint, self.cov, sys, cfg.filter, kind="common-slam")
                self._log(res, frame_t)

    def _evict_stale_landmarks(self, frame_t):
        span = self.config.window_size * self.config.cam_period
        for rid in self.joint.order:
            stale = sorted(
                f.feature_id
                for f in self.joint.states[rid].slam
                if frame_t - self.slam_last_obs.get((rid, f.feature_id), frame_t)
                >= span - 1e-9
            )
            for fid in stale:
                self.joint, self.cov = ce.joint_remove_slam_feature(self.joint, self.cov,
                                                                    rid, fid)
                self.slam_last_obs.pop((rid, fid), None)

    def _record(self, rid, frame_t):
        from .state import ErrorIndex

        offs, _ = self.joint.offsets()
        st = self.joint.states[rid]
        idx = ErrorIndex(st)
        o = offs[rid]
        self.records[rid].append(FrameRecord(
            frame_t,
            st.imu.orientation.copy(),
            st.imu.position.copy(),
            self.cov[o:o + 3, o:o + 3].copy(),
            self.cov[o + 3:o + 6, o + 3:o + 6].copy(),
        ))

    def _log(self, res, frame_t):
        if isinstance(res, UpdateResult):
            self.update_log.append(UpdateLogRow(frame_t, -1, res.kind, res.rows,
                                                res.chi2, res.runtime_us))


def initial_robot_state(robot_id, traj, calib: CalibrationState, window: int,
                        slam_cap: int, estimate_calibration=False) -> RobotState:
    q, p = traj.pose(0.0)
    imu = InertialState(orientation=q, position=p, velocity=traj.velocity(0.0))
    return RobotState(robot_id, imu, calib.copy(), CloneWindow(window),
                      SlamMap(slam_cap), 0.0, estimate_calibration)


def perturbed_initial(state: RobotState, cov0: np.ndarray, rng) -> RobotState:
    """Draw the initial estimate from the stated prior around the truth."""
    L = np.linalg.cholesky(cov0 + 1e-15 * np.eye(cov0.shape[0]))
    return apply_correction(state, L @ rng.standard_normal(cov0.shape[0]))
