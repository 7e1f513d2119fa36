import subprocess
import sys

import numpy as np
import pytest

from coopvio.association import KeyframeSummary
from coopvio.comms import (
    BadCrc,
    BadMagic,
    BadVersion,
    InProcessBus,
    SocketTransport,
    StatePacket,
    Truncated,
    decode_frame_packet,
    decode_packet,
    encode_frame_packet,
    encode_packet,
    frame_decode,
    frame_encode,
)
from coopvio.state import (
    CalibrationState,
    Clone,
    CloneWindow,
    InertialState,
    RobotState,
    SlamFeature,
    SlamMap,
)
from coopvio.vision import BearingObservation, FeatureTrack
from coopvio import so3


def random_packet(rng, rid=0, n_clones=3, n_feats=2, n_tracks=2, with_kf=True):
    st = RobotState(
        rid,
        InertialState(
            orientation=so3.quat_normalize(rng.standard_normal(4)),
            position=rng.standard_normal(3),
            velocity=rng.standard_normal(3),
            gyro_bias=rng.standard_normal(3) * 0.01,
            accel_bias=rng.standard_normal(3) * 0.05,
        ),
        CalibrationState(
            time_offset=float(rng.standard_normal() * 0.01),
            extrinsic_rotation=so3.quat_normalize(rng.standard_normal(4)),
            extrinsic_translation=rng.standard_normal(3) * 0.1,
            intrinsics=np.array([460.0, 455.0, 320.0, 240.0, 0.01, -0.02, 0.001, 0.002]),
        ),
        CloneWindow(11),
        SlamMap(5),
        timestamp=float(rng.uniform(0, 100)),
        estimate_calibration=bool(rng.integers(2)),
    )
    for k in range(n_clones):
        st.clones.clones.append(
            Clone(float(k), so3.quat_normalize(rng.standard_normal(4)), rng.standard_normal(3))
        )
    for j in range(n_feats):
        p = rng.standard_normal(3)
        st.slam.features.append(SlamFeature(int(rng.integers(1, 1000)) + j * 1000, p, p + 0.01))
    dim = st.error_dim()
    A = rng.standard_normal((dim, dim))
    cov = A @ A.T * 0.01
    tracks = []
    for j in range(n_tracks):
        tr = FeatureTrack(int(rng.integers(1, 5000)))
        for k in range(int(rng.integers(1, 5))):
            tr.observations.append(
                BearingObservation(rid, tr.feature_id, float(k) * 0.1,
                                   rng.uniform(0, 640, 2), 1.0)
            )
        tracks.append(tr)
    kf = None
    if with_kf:
        kf = KeyframeSummary(rid, st.timestamp,
                             [(int(i), rng.uniform(0, 640, 2)) for i in rng.integers(0, 99, 5)])
    return StatePacket(rid, st.timestamp, st, cov, tracks, kf)


def packets_equal(a: StatePacket, b: StatePacket) -> bool:
    if a.robot_id != b.robot_id or a.timestamp != b.timestamp:
        return False
    sa, sb = a.state, b.state
    checks = [
        np.array_equal(sa.imu.orientation, sb.imu.orientation),
        np.array_equal(sa.imu.position, sb.imu.position),
        np.array_equal(sa.imu.velocity, sb.imu.velocity),
        np.array_equal(sa.imu.gyro_bias, sb.imu.gyro_bias),
        np.array_equal(sa.imu.accel_bias, sb.imu.accel_bias),
        sa.calib.time_offset == sb.calib.time_offset,
        np.array_equal(sa.calib.extrinsic_rotation, sb.calib.extrinsic_rotation),
        np.array_equal(sa.calib.extrinsic_translation, sb.calib.extrinsic_translation),
        np.array_equal(sa.calib.intrinsics, sb.calib.intrinsics),
        sa.estimate_calibration == sb.estimate_calibration,
        len(sa.clones) == len(sb.clones),
        sa.clones.capacity == sb.clones.capacity,
        len(sa.slam) == len(sb.slam),
        sa.slam.capacity == sb.slam.capacity,
        np.array_equal(a.cov, b.cov),
        len(a.tracks) == len(b.tracks),
    ]
    if not all(checks):
        return False
    for ca, cb in zip(sa.clones, sb.clones):
        if ca.timestamp != cb.timestamp:
            return False
        if not np.array_equal(ca.orientation, cb.orientation):
            return False
        if not np.array_equal(ca.position, cb.position):
            return False
    for fa, fb in zip(sa.slam, sb.slam):
        if fa.feature_id != fb.feature_id:
            return False
        if not (np.array_equal(fa.position, fb.position)
                and np.array_equal(fa.first_estimate, fb.first_estimate)):
            return False
    for ta, tb in zip(a.tracks, b.tracks):
        if ta.feature_id != tb.feature_id or len(ta.observations) != len(tb.observations):
            return False
        for oa, ob in zip(ta.observations, tb.observations):
            if not (oa.robot_id == ob.robot_id and oa.frame_timestamp == ob.frame_timestamp
                    and np.array_equal(oa.uv, ob.uv) and oa.noise_sigma == ob.noise_sigma):
                return False
    if (a.keyframe is None) != (b.keyframe is None):
        return False
    if a.keyframe is not None:
        if (a.keyframe.robot_id != b.keyframe.robot_id
                or a.keyframe.timestamp != b.keyframe.timestamp
                or len(a.keyframe.entries) != len(b.keyframe.entries)):
            return False
        for (ia, uva), (ib, uvb) in zip(a.keyframe.entries, b.keyframe.entries):
            if ia != ib or not np.array_equal(uva, uvb):
                return False
    return True


def test_round_trip_random_packets():
    rng = np.random.default_rng(0)
    for k in range(50):
        pkt = random_packet(rng, rid=k % 4, n_clones=int(rng.integers(0, 6)),
                            n_feats=int(rng.integers(0, 4)),
                            n_tracks=int(rng.integers(0, 4)),
                            with_kf=bool(rng.integers(2)))
        payload = encode_packet(pkt)
        back = decode_packet(payload)
        assert packets_equal(pkt, back)
        # bit-exact re-encode of a decoded packet
        assert encode_packet(back) == payload


def test_frame_errors_distinct():
    rng = np.random.default_rng(1)
    pkt = random_packet(rng)
    frame = encode_frame_packet(pkt)
    with pytest.raises(BadMagic):
        frame_decode(b"XVIO" + frame[4:])
    bad_ver = bytearray(frame)
    bad_ver[4] = 99
    with pytest.raises(BadVersion):
        frame_decode(bytes(bad_ver))
    flipped = bytearray(frame)
    flipped[20] ^= 0x01  # single payload bit
    with pytest.raises(BadCrc):
        frame_decode(bytes(flipped))
    with pytest.raises(Truncated):
        frame_decode(frame[:-3])
    assert BadMagic.code != BadVersion.code != BadCrc.code != Truncated.code
    # intact frame decodes
    back = decode_frame_packet(frame)
    assert packets_equal(pkt, back)


def test_bus_fanout_and_order():
    rng = np.random.default_rng(2)
    bus = InProcessBus()
    for r in (0, 1, 2):
        bus.register(r)
    p = random_packet(rng, rid=0)
    bus.publish(p, now=0.0)
    for r in (1, 2):
        got = bus.drain(r, now=0.0)
        assert len(got) == 1 and got[0].robot_id == 0
        assert bus.drain(r, now=1.0) == []
    with pytest.raises(KeyError):
        bus.publish(random_packet(rng, rid=9), now=0.0)


def test_bus_drop_probability_one():
    rng = np.random.default_rng(3)
    bus = InProcessBus(drop_prob=1.0)
    bus.register(0)
    bus.register(1)
    bus.publish(random_packet(rng, rid=0), now=0.0)
    assert bus.drain(1, now=10.0) == []


def test_bus_delay_and_per_sender_order():
    rng = np.random.default_rng(4)
    bus = InProcessBus(delay=0.1)
    bus.register(0)
    bus.register(1)
    p1 = random_packet(rng, rid=0)
    p1.timestamp = 1.0
    p2 = random_packet(rng, rid=0)
    p2.timestamp = 2.0
    bus.publish(p1, now=0.0)
    bus.publish(p2, now=0.05)
    assert bus.drain(1, now=0.05) == []
    got = bus.drain(1, now=0.1)
    assert len(got) == 1 and got[0].timestamp == 1.0
    got = bus.drain(1, now=0.2)
    assert len(got) == 1 and got[0].timestamp == 2.0


def test_socket_transport_round_trip():
    rng = np.random.default_rng(5)
    tr = SocketTransport()
    for r in (0, 1, 2):
        tr.register(r)
    tr.start()
    try:
        sent = {r: random_packet(rng, rid=r) for r in (0, 1, 2)}
        for r in (0, 1, 2):
            tr.publish(sent[r], now=0.0)
        for r in (0, 1, 2):
            got = tr.drain(r, expected=2)
            assert sorted(p.robot_id for p in got) == sorted(x for x in (0, 1, 2) if x != r)
            for p in got:
                assert packets_equal(p, sent[p.robot_id])
    finally:
        tr.close()


CHILD_SCRIPT = r"""
import select, socket, sys
import numpy as np
sys.path.insert(0, {src!r})
from coopvio.comms import encode_frame_packet, frame_decode, decode_packet
from tests.test_comms import random_packet

port = int(sys.argv[1])
n = int(sys.argv[2])
rng = np.random.default_rng(1234)
conn = socket.create_connection(("127.0.0.1", port))
conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
buf = bytearray()
received = 0

def drain_available(block):
    global received
    while True:
        timeout = 30.0 if block else 0.0
        ready, _, _ = select.select([conn], [], [], timeout)
        if not ready:
            return
        data = conn.recv(65536)
        assert data, "parent closed early"
        buf.extend(data)
        while True:
            try:
                ptype, payload, consumed = frame_decode(bytes(buf))
            except Exception:
                break
            del buf[:consumed]
            pkt = decode_packet(payload)
            assert pkt.timestamp == float(received), (pkt.timestamp, received)
            received += 1
        if not block or received >= n:
            return

# interleave sending with reading echoes so neither TCP window fills up
pkts = [random_packet(rng, rid=1, n_clones=2, n_feats=1, n_tracks=1) for _ in range(n)]
for k, p in enumerate(pkts):
    p.timestamp = float(k)
    conn.sendall(encode_frame_packet(p))
    drain_available(block=False)
while received < n:
    drain_available(block=True)
print("OK", received)
"""


def test_cross_process_loopback_exchange():
    # two OS processes exchange 1000 packets with zero loss, order preserved
    import socket as socket_mod
    from pathlib import Path

    n = 1000
    srv = socket_mod.socket(socket_mod.AF_INET, socket_mod.SOCK_STREAM)
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]
    root = Path(__file__).resolve().parents[1]
    script = CHILD_SCRIPT.format(src=str(root / "src"))
    child = subprocess.Popen(
        [sys.executable, "-c", script, str(port), str(n)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, cwd=root,
    )
    conn, _ = srv.accept()
    conn.setsockopt(socket_mod.IPPROTO_TCP, socket_mod.TCP_NODELAY, 1)
    from coopvio.comms import frame_decode, decode_packet, encode_frame_packet

    buf = bytearray()
    received = []
    while len(received) < n:
        data = conn.recv(65536)
        assert data, "child closed early"
        buf.extend(data)
        while True:
            try:
                ptype, payload, consumed = frame_decode(bytes(buf))
            except Exception:
                break
            del buf[:consumed]
            pkt = decode_packet(payload)
            received.append(pkt)
            conn.sendall(encode_frame_packet(pkt))  # echo back
    assert [p.timestamp for p in received] == [float(k) for k in range(n)]
    out, err = child.communicate(timeout=60)
    assert child.returncode == 0, err.decode()
    assert b"OK 1000" in out
    conn.close()
    srv.close()
