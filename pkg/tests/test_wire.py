"""Frame codec: round-trips, malformed input, and the stream helpers."""
import io
import struct

import numpy as np
import pytest

from splitnav import wire
from splitnav.errors import WireError
from splitnav.quantize import QuantizedTensor, quantize
from splitnav.rng import substream

SEED = 777001


def qt_fixture(shape=(2, 3, 4)):
    rng = substream(SEED, "data", 0)
    return quantize(rng.standard_normal(shape).astype(np.float32))


def roundtrip(msg):
    decoded, rest = wire.decode(wire.encode(msg))
    assert rest == b""
    return decoded


def test_header_layout():
    blob = wire.frame(wire.MsgType.HELLO, b"xyz")
    assert len(blob) == 11 + 3
    magic, version, kind, length = struct.unpack("<IHBI", blob[:11])
    assert magic == 0x4E535054
    assert version == 1
    assert kind == 0
    assert length == 3


def test_hello_roundtrip():
    msg = wire.Hello(6, 8, ((0, 72), (1, 4608), (2, 6912)))
    assert roundtrip(msg) == msg
    assert roundtrip(wire.Hello(3, 4)) == wire.Hello(3, 4)


def test_observation_roundtrip():
    qt = qt_fixture()
    msg = wire.Observation(2, qt)
    got = roundtrip(msg)
    assert got.branch_id == 2
    assert got.tensor.shape == qt.shape
    assert got.tensor.scale == qt.scale
    assert got.tensor.zero_point == qt.zero_point
    np.testing.assert_array_equal(got.tensor.data, qt.data)


def test_depth_reply_roundtrip():
    pooled = substream(SEED, "data", 1).random((6, 8), dtype=np.float32)
    got = roundtrip(wire.DepthReply(1, pooled))
    assert got.branch_id == 1
    np.testing.assert_array_equal(got.pooled, pooled)


def test_stats_bye_error_roundtrip():
    stats = wire.Stats(10, 720, 11, 192)
    assert roundtrip(stats) == stats
    assert roundtrip(wire.Bye()) == wire.Bye()
    assert roundtrip(wire.Error("nope")) == wire.Error("nope")


def test_bad_magic_rejected():
    blob = bytearray(wire.encode(wire.Bye()))
    blob[0] ^= 0xFF
    with pytest.raises(WireError, match="magic"):
        wire.decode(bytes(blob))


def test_bad_version_rejected():
    blob = bytearray(wire.encode(wire.Bye()))
    blob[4] = 9
    with pytest.raises(WireError, match="version"):
        wire.decode(bytes(blob))


def test_unknown_type_rejected():
    blob = bytearray(wire.encode(wire.Bye()))
    blob[6] = 200
    with pytest.raises(WireError, match="type"):
        wire.decode(bytes(blob))


def test_truncated_frame_rejected():
    blob = wire.encode(wire.Observation(0, qt_fixture()))
    with pytest.raises(WireError):
        wire.decode(blob[:-1])


def test_observation_shape_must_match_codes():
    qt = qt_fixture((2, 2))
    payload = wire._encode_observation(wire.Observation(0, qt))
    clipped = payload[:-1]
    with pytest.raises(WireError, match="code bytes"):
        wire._decode_observation(clipped)


def test_observation_zero_dim_rejected():
    head = struct.pack("<BfBB", 0, 1.0, 0, 2) + struct.pack("<2I", 0, 4)
    with pytest.raises(WireError, match="zero"):
        wire._decode_observation(head)


def test_oversized_declared_payload_rejected():
    header = struct.pack("<IHBI", wire.MAGIC, wire.VERSION, 1, wire.MAX_PAYLOAD + 1)
    with pytest.raises(WireError, match="frame limit"):
        wire.parse_header(header)


def test_fuzzed_frames_never_crash():
    rng = substream(SEED, "data", 2)
    good = wire.encode(wire.Observation(1, qt_fixture()))
    for k in range(2000):
        blob = bytearray(good)
        for _ in range(int(rng.integers(1, 6))):
            blob[int(rng.integers(0, len(blob)))] = int(rng.integers(0, 256))
        try:
            wire.decode(bytes(blob))
        except WireError:
            pass  # rejection is the expected outcome; crashes are not


def test_stream_helpers_roundtrip():
    buf = io.BytesIO()
    sent = wire.write_frame(buf, wire.Hello(6, 8, ((0, 72),)))
    buf.seek(0)
    msg, size = wire.read_frame_sized(buf)
    assert size == sent
    assert msg == wire.Hello(6, 8, ((0, 72),))


def test_read_frame_eof_handling():
    empty = io.BytesIO()
    msg, size = wire.read_frame_sized(empty, eof_ok=True)
    assert msg is None and size == 0
    with pytest.raises(WireError, match="closed"):
        wire.read_frame(io.BytesIO())
    # a mid-frame close is an error even with eof_ok
    partial = io.BytesIO(wire.encode(wire.Bye())[:5])
    with pytest.raises(WireError, match="closed"):
        wire.read_frame_sized(partial, eof_ok=True)


def test_multiple_frames_in_one_buffer():
    blob = wire.encode(wire.Bye()) + wire.encode(wire.Error("x"))
    first, rest = wire.decode(blob)
    second, tail = wire.decode(rest)
    assert first == wire.Bye()
    assert second == wire.Error("x")
    assert tail == b""
