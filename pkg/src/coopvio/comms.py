"""Inter-robot exchange of states, covariances, and feature tracks.

Wire format (all integers little-endian, all floats IEEE-754 binary64 LE):

    frame   := magic "CVIO" | version u16 | payload_type u16
               | payload_len u32 | payload bytes | crc32 u32 (of payload)

StatePacket payload field order:

    robot_id u32 | timestamp f64 | estimate_calibration u8
    | imu: q xyzw 4f64, p 3f64, v 3f64, bg 3f64, ba 3f64
    | calib: time_offset f64, q_CI xyzw 4f64, p_IinC 3f64, intrinsics 8f64
    | clones: count u16, capacity u16, then per clone (t f64, q 4f64, p 3f64)
    | slam: count u16, capacity u16, then per feat (id u64, pos 3f64, first 3f64)
    | cov: dim u32, dim*dim f64 row-major
    | tracks: count u16, then per track (feature_id u64, n_obs u16,
              per obs (robot_id u32, t f64, u f64, v f64, sigma f64))
    | keyframe: present u8, then (robot_id u32, t f64, n u16,
              per entry (feature_id u64, u f64, v f64))

The in-process bus delivers to every registered peer with optional per-link
delay and drop probability; per-sender order is preserved. The socket
transport speaks the same frames over one loopback stream per directed pair,
so estimates are transport-agnostic given the same delivery schedule.
"""

import heapq
import select
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .association import KeyframeSummary
from .state import CalibrationState, Clone, CloneWindow, InertialState, RobotState, SlamFeature, SlamMap
from .vision import BearingObservation, FeatureTrack

MAGIC = b"CVIO"
VERSION = 1
PAYLOAD_STATE_PACKET = 1
_HEADER = struct.Struct("<4sHHI")


class WireError(ValueError):
    code = "wire"


class BadMagic(WireError):
    code = "bad-magic"


class BadVersion(WireError):
    code = "bad-version"


class BadCrc(WireError):
    code = "bad-crc"


class Truncated(WireError):
    code = "truncated"


@dataclass
class StatePacket:
    robot_id: int
    timestamp: float
    state: RobotState
    cov: np.ndarray
    tracks: list = field(default_factory=list)  # [FeatureTrack, ...]
    keyframe: KeyframeSummary | None = None


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}d", *[float(v) for v in vals]))

    def array(self, a):
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def _take(self, n):
        if self.off + n > len(self.buf):
            raise Truncated(f"payload truncated at offset {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self, n=1):
        vals = struct.unpack(f"<{n}d", self._take(8 * n))
        return vals[0] if n == 1 else np.array(vals)

    def done(self):
        return self.off == len(self.buf)


def encode_packet(pkt: StatePacket) -> bytes:
    w = _Writer()
    w.u32(pkt.robot_id)
    w.f64(pkt.timestamp)
    st = pkt.state
    w.u8(1 if st.estimate_calibration else 0)
    w.array(st.imu.orientation)
    w.array(st.imu.position)
    w.array(st.imu.velocity)
    w.array(st.imu.gyro_bias)
    w.array(st.imu.accel_bias)
    w.f64(st.calib.time_offset)
    w.array(st.calib.extrinsic_rotation)
    w.array(st.calib.extrinsic_translation)
    w.array(st.calib.intrinsics)
    w.u16(len(st.clones))
    w.u16(st.clones.capacity)
    for c in st.clones:
        w.f64(c.timestamp)
        w.array(c.orientation)
        w.array(c.position)
    w.u16(len(st.slam))
    w.u16(st.slam.capacity)
    for f in st.slam:
        w.u64(f.feature_id)
        w.array(f.position)
        w.array(f.first_estimate)
    dim = pkt.cov.shape[0]
    w.u32(dim)
    w.array(pkt.cov)
    w.u16(len(pkt.tracks))
    for tr in pkt.tracks:
        w.u64(tr.feature_id)
        w.u16(len(tr.observations))
        for o in tr.observations:
            w.u32(o.robot_id)
            w.f64(o.frame_timestamp)
            w.f64(o.uv[0])
            w.f64(o.uv[1])
            w.f64(o.noise_sigma)
    if pkt.keyframe is None:
        w.u8(0)
    else:
        w.u8(1)
        w.u32(pkt.keyframe.robot_id)
        w.f64(pkt.keyframe.timestamp)
        w.u16(len(pkt.keyframe.entries))
        for fid, uv in pkt.keyframe.entries:
            w.u64(int(fid))
            w.f64(uv[0])
            w.f64(uv[1])
    return w.bytes()


def decode_packet(payload: bytes) -> StatePacket:
    r = _Reader(payload)
    robot_id = r.u32()
    timestamp = r.f64()
    est_cal = bool(r.u8())
    imu = InertialState(
        orientation=r.f64(4), position=r.f64(3), velocity=r.f64(3),
        gyro_bias=r.f64(3), accel_bias=r.f64(3),
    )
    calib = CalibrationState(
        time_offset=r.f64(), extrinsic_rotation=r.f64(4),
        extrinsic_translation=r.f64(3), intrinsics=r.f64(8),
    )
    n_clones = r.u16()
    window = CloneWindow(r.u16())
    for _ in range(n_clones):
        t = r.f64()
        q = r.f64(4)
        p = r.f64(3)
        window.clones.append(Clone(t, q, p))
    n_feats = r.u16()
    slam = SlamMap(r.u16())
    for _ in range(n_feats):
        fid = r.u64()
        pos = r.f64(3)
        first = r.f64(3)
        slam.features.append(SlamFeature(fid, pos, first))
    dim = r.u32()
    cov = r.f64(dim * dim).reshape(dim, dim) if dim else np.zeros((0, 0))
    n_tracks = r.u16()
    tracks = []
    for _ in range(n_tracks):
        fid = r.u64()
        n_obs = r.u16()
        tr = FeatureTrack(fid)
        for _ in range(n_obs):
            rid = r.u32()
            t = r.f64()
            u = r.f64()
            v = r.f64()
            sig = r.f64()
            tr.observations.append(BearingObservation(rid, fid, t, np.array([u, v]), sig))
        tracks.append(tr)
    keyframe = None
    if r.u8():
        krid = r.u32()
        kt = r.f64()
        n = r.u16()
        entries = []
        for _ in range(n):
            fid = r.u64()
            u = r.f64()
            v = r.f64()
            entries.append((fid, np.array([u, v])))
        keyframe = KeyframeSummary(krid, kt, entries)
    state = RobotState(robot_id, imu, calib, window, slam, timestamp, est_cal)
    return StatePacket(robot_id, timestamp, state, cov, tracks, keyframe)


def frame_encode(payload: bytes, payload_type: int = PAYLOAD_STATE_PACKET) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, payload_type, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def frame_decode(buf: bytes):
    """Returns (payload_type, payload, consumed_bytes)."""
    if len(buf) < _HEADER.size:
        raise Truncated("frame header incomplete")
    magic, version, ptype, plen = _HEADER.unpack(buf[:_HEADER.size])
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    total = _HEADER.size + plen + 4
    if len(buf) < total:
        raise Truncated(f"frame needs {total} bytes, have {len(buf)}")
    payload = buf[_HEADER.size:_HEADER.size + plen]
    (crc,) = struct.unpack("<I", buf[_HEADER.size + plen:total])
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise BadCrc("payload crc mismatch")
    return ptype, payload, total


def encode_frame_packet(pkt: StatePacket) -> bytes:
    return frame_encode(encode_packet(pkt))


def decode_frame_packet(buf: bytes) -> StatePacket:
    ptype, payload, consumed = frame_decode(buf)
    if ptype != PAYLOAD_STATE_PACKET:
        raise WireError(f"unexpected payload type {ptype}")
    if consumed != len(buf):
        raise WireError("trailing bytes after frame")
    return decode_packet(payload)


class InProcessBus:
    """Broadcast bus with per-link delay and drop probability.

    Packets are enqueued with a delivery time; ``drain`` returns everything
    due at the given clock. Per-sender order is preserved.
    """

    def __init__(self, delay: float = 0.0, drop_prob: float = 0.0, seed: int = 0,
                 link_params: dict | None = None):
        self.default_delay = float(delay)
        self.default_drop = float(drop_prob)
        self.link_params = link_params or {}
        self.rng = np.random.default_rng(seed)
        self.queues: dict = {}
        self._seq = 0

    def register(self, robot_id: int):
        self.queues.setdefault(robot_id, [])

    def publish(self, pkt: StatePacket, now: float = 0.0):
        if pkt.robot_id not in self.queues:
            raise KeyError(f"sender {pkt.robot_id} not registered")
        for dst in self.queues:
            if dst == pkt.robot_id:
                continue
            delay, drop = self.link_params.get(
                (pkt.robot_id, dst), (self.default_delay, self.default_drop)
            )
            if drop > 0 and self.rng.random() < drop:
                continue
            self._seq += 1
            heapq.heappush(self.queues[dst], (now + delay, self._seq, pkt))

    def drain(self, robot_id: int, now: float):
        q = self.queues[robot_id]
        out = []
        while q and q[0][0] <= now + 1e-12:
            out.append(heapq.heappop(q)[2])
        return out


class BusTransport:
    """Runner-facing wrapper over the in-process bus."""

    kind = "bus"

    def __init__(self, **bus_kwargs):
        self.bus = InProcessBus(**bus_kwargs)

    def register(self, robot_id: int):
        self.bus.register(robot_id)

    def publish(self, pkt: StatePacket, now: float):
        self.bus.publish(pkt, now)

    def drain(self, robot_id: int, now: float, expected: int | None = None):
        return self.bus.drain(robot_id, now)

    def close(self):
        pass


class SocketTransport:
    """Loopback TCP transport, one stream per directed robot pair.

    Robots run in one process here; the wire path (encode, TCP, decode) is
    still exercised end to end. ``drain`` blocks until the expected number of
    frames arrived, giving the same delivery schedule as the zero-delay bus.
    """

    kind = "sockets"

    def __init__(self):
        self.servers: dict = {}
        self.ports: dict = {}
        self.out_conns: dict = {}  # (src, dst) -> socket
        self.in_conns: dict = {}  # dst -> list of accepted sockets
        self.buffers: dict = {}  # dst -> bytearray per connection
        self._started = False

    def register(self, robot_id: int):
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(("127.0.0.1", 0))
        srv.listen(16)
        self.servers[robot_id] = srv
        self.ports[robot_id] = srv.getsockname()[1]
        self.in_conns[robot_id] = []
        self.buffers[robot_id] = []

    def start(self):
        ids = sorted(self.servers.keys())
        for src in ids:
            for dst in ids:
                if src == dst:
                    continue
                c = socket.create_connection(("127.0.0.1", self.ports[dst]))
                c.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self.out_conns[(src, dst)] = c
        for dst in ids:
            for _ in range(len(ids) - 1):
                conn, _ = self.servers[dst].accept()
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self.in_conns[dst].append(conn)
                self.buffers[dst].append(bytearray())
        self._started = True

    def publish(self, pkt: StatePacket, now: float = 0.0):
        if not self._started:
            self.start()
        frame = encode_frame_packet(pkt)
        for (src, dst), conn in self.out_conns.items():
            if src == pkt.robot_id:
                conn.sendall(frame)

    def drain(self, robot_id: int, now: float = 0.0, expected: int | None = None):
        if not self._started:
            self.start()
        if expected is None:
            expected = len(self.servers) - 1
        out = []
        conns = self.in_conns[robot_id]
        bufs = self.buffers[robot_id]
        while len(out) < expected:
            # flush complete frames already buffered
            flushed = False
            for buf in bufs:
                pkt = self._try_decode(buf)
                if pkt is not None:
                    out.append(pkt)
                    flushed = True
            if flushed:
                continue
            ready, _, _ = select.select(conns, [], [], 5.0)
            if not ready:
                raise TimeoutError("socket drain timed out")
            for conn in ready:
                data = conn.recv(65536)
                if data:
                    bufs[conns.index(conn)].extend(data)
        return out

    @staticmethod
    def _try_decode(buf: bytearray):
        try:
            ptype, payload, consumed = frame_decode(bytes(buf))
        except Truncated:
            return None
        del buf[:consumed]
        return decode_packet(payload)

    def close(self):
        for c in self.out_conns.values():
            c.close()
        for conns in self.in_conns.values():
            for c in conns:
                c.close()
        for s in self.servers.values():
            s.close()


def make_transport(kind: str, **kwargs):
    if kind == "bus":
        return BusTransport(**kwargs)
    if kind == "sockets":
        return SocketTransport()
    raise ValueError(f"unknown transport {kind!r}")
