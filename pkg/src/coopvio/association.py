"""Feature association across robots with controllable imperfection.

Descriptor matching is replaced by ground-truth feature-identity equality:
candidates are found through an inverted id index over ingested keyframe
summaries, then corrupted by a configurable miss rate and false-match rate
(false matches are rewired to a different id from the same remote frame so
the estimator's chi-square gate has realistic outliers to reject). A
reprojection gate emulates the geometric verification step when the caller
supplies one. Historical queries cover stored windows of any robot, including
the querying robot's own past (self loop closures).
"""

import bisect
from dataclasses import dataclass, field

import numpy as np


@dataclass
class KeyframeSummary:
    robot_id: int
    timestamp: float
    entries: list  # [(feature_id, uv array), ...]


@dataclass
class Match:
    own_feature_id: int
    other_robot_id: int
    other_feature_id: int
    epoch: str  # "live" | "historical"
    other_timestamp: float
    geometric_ok: bool = True
    false_match: bool = False  # bookkeeping for tests/statistics


@dataclass
class MatchResult:
    matches: list = field(default_factory=list)

    def __len__(self):
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)


class MatchDatabase:
    """Per-robot store of every peer's keyframe summaries with an id index."""

    def __init__(self, own_robot_id: int):
        self.own_robot_id = own_robot_id
        self.keyframes: dict = {}  # robot_id -> {timestamp: KeyframeSummary}
        self.id_index: dict = {}  # robot_id -> {feature_id: sorted [timestamps]}

    def ingest_remote_tracks(self, keyframe: KeyframeSummary):
        """Index a keyframe summary; duplicate (robot, timestamp) overwrites."""
        rid = keyframe.robot_id
        by_time = self.keyframes.setdefault(rid, {})
        index = self.id_index.setdefault(rid, {})
        old = by_time.get(keyframe.timestamp)
        if old is not None:
            for fid, _ in old.entries:
                times = index.get(fid, [])
                k = bisect.bisect_left(times, old.timestamp)
                if k < len(times) and times[k] == old.timestamp:
                    times.pop(k)
        by_time[keyframe.timestamp] = keyframe
        for fid, _ in keyframe.entries:
            times = index.setdefault(fid, [])
            k = bisect.bisect_left(times, keyframe.timestamp)
            if k >= len(times) or times[k] != keyframe.timestamp:
                times.insert(k, keyframe.timestamp)

    def query_matches(self, own_frame, mode: str, miss_rate: float,
                      false_match_rate: float, rng, now: float | None = None,
                      live_span: float = 1.2, geometry_gate=None) -> MatchResult:
        """Match own current features against ingested summaries.

        ``own_frame`` is (timestamp, [(feature_id, uv), ...]). ``mode`` is
        "live" (other robots' recent frames) or "historical" (any robot's
        frames older than the live span, own history included).
        """
        if not (0.0 <= miss_rate < 1.0) or not (0.0 <= false_match_rate < 1.0):
            raise ValueError("rates must lie in [0, 1)")
        if mode not in ("live", "historical"):
            raise ValueError(f"unknown mode {mode!r}")
        t_now = own_frame[0] if now is None else now
        result = MatchResult()
        for fid, _uv in own_frame[1]:
            for rid, index in self.id_index.items():
                if mode == "live" and rid == self.own_robot_id:
                    continue  # a frame never matches the robot's own live window
                times = index.get(fid)
                if not times:
                    continue
                if mode == "live":
                    t_hit = times[-1]
                    if t_now - t_hit > live_span:
                        continue
                else:
                    k = bisect.bisect_right(times, t_now - live_span) - 1
                    if k < 0:
                        continue
                    t_hit = times[k]
                if miss_rate > 0 and rng.random() < miss_rate:
                    continue
                matched_fid = fid
                false_match = False
                if false_match_rate > 0 and rng.random() < false_match_rate:
                    frame = self.keyframes[rid][t_hit]
                    others = [f for f, _ in frame.entries if f != fid]
                    if others:
                        matched_fid = others[int(rng.integers(len(others)))]
                        false_match = True
                geo_ok = True
                if geometry_gate is not None:
                    geo_ok = bool(geometry_gate(fid, rid, matched_fid, t_hit))
                if not geo_ok:
                    continue
                result.matches.append(
                    Match(fid, rid, matched_fid, mode, t_hit, geo_ok, false_match)
                )
                break  # one match per own feature per epoch
        return result


def reprojection_gate(world_positions: dict, gate_px: float, noise_px: float, rng):
    """Ground-truth reprojection stand-in for the geometric check.

    True pairs have zero reprojection discrepancy by construction; wrong pairs
    show the distance between the two landmarks scaled into pixels. Noise
    makes the gate imperfect on purpose.
    """

    def gate(own_fid, rid, other_fid, t_hit):
        if own_fid == other_fid:
            return True
        pa = world_positions.get(own_fid)
        pb = world_positions.get(other_fid)
        if pa is None or pb is None:
            return False
        # crude angular error at a nominal 3 m range mapped through a nominal
        # 460 px focal length, with additive noise
        err_px = 460.0 * np.linalg.norm(pa - pb) / 3.0 + noise_px * rng.standard_normal()
        return abs(err_px) < gate_px

    return gate


@dataclass
class ArchiveEntry:
    robot_id: int
    window_index: int
    t_start: float
    t_end: float
    state: object  # RobotState snapshot
    cov: np.ndarray | None
    tracks: dict  # feature_id -> [BearingObservation, ...]
    keyframes: list = field(default_factory=list)

    def contains(self, t: float) -> bool:
        return self.t_start - 1e-9 <= t <= self.t_end + 1e-9


class HistoricalArchive:
    """Non-overlapping past windows kept for loop closure."""

    def __init__(self, robot_id: int):
        self.robot_id = robot_id
        self.entries: list[ArchiveEntry] = []

    def add_entry(self, entry: ArchiveEntry):
        if self.entries and entry.t_start < self.entries[-1].t_end - 1e-9:
            raise ValueError("archive windows must not overlap")
        self.entries.append(entry)

    def lookup(self, timestamps) -> list:
        """Minimal set of stored windows containing the given timestamps."""
        hits = []
        seen = set()
        dropped = 0
        for t in timestamps:
            k = bisect.bisect_right([e.t_start for e in self.entries], t) - 1
            if k >= 0 and self.entries[k].contains(t):
                if k not in seen:
                    seen.add(k)
                    hits.append(self.entries[k])
            else:
                dropped += 1
        return hits

    def spans(self):
        return [(e.t_start, e.t_end) for e in self.entries]


def archive_lookup(archive: HistoricalArchive, matches) -> list:
    """Windows needed to process the matched historical measurements."""
    return archive.lookup([m.other_timestamp for m in matches])
