"""Framed binary protocol between the drone-side head and the edge tail.

Every frame is an 11-byte little-endian header -- magic, version, message
type, payload length -- followed by the payload.  Observations carry the
quantization parameters next to the uint8 codes, so a frame is
self-describing and the reply needs no shared state beyond the hello
exchange.  Decoding never trusts a length field without bounds checks; a
bad frame raises ``WireError`` with the reason.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import WireError
from .quantize import QuantizedTensor

MAGIC = 0x4E535054
VERSION = 1
HEADER = struct.Struct("<IHBI")
MAX_PAYLOAD = 1 << 24
MAX_RANK = 8


class MsgType(IntEnum):
    HELLO = 0
    OBSERVATION = 1
    DEPTH_REPLY = 2
    STATS = 3
    BYE = 4
    ERROR = 5


@dataclass(frozen=True)
class Hello:
    """Pool geometry plus the branch menu (id, payload bytes) pairs.

    The client may send an empty menu to ask for the server's; the server's
    reply is authoritative.
    """
    pool_h: int
    pool_w: int
    menu: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class Observation:
    branch_id: int
    tensor: QuantizedTensor


@dataclass(frozen=True)
class DepthReply:
    branch_id: int
    pooled: np.ndarray  # (pool_h, pool_w) float32


@dataclass(frozen=True)
class Stats:
    """Server-side session counters, returned in response to BYE."""
    frames_received: int
    observation_payload_bytes: int  # uint8 code bytes only, no headers
    frames_sent: int
    reply_payload_bytes: int


@dataclass(frozen=True)
class Bye:
    pass


@dataclass(frozen=True)
class Error:
    message: str


Message = Hello | Observation | DepthReply | Stats | Bye | Error

_HELLO_HEAD = struct.Struct("<BBH")
_HELLO_ENTRY = struct.Struct("<BI")
_OBS_HEAD = struct.Struct("<BfBB")
_REPLY_HEAD = struct.Struct("<BHH")
_STATS_BODY = struct.Struct("<QQQQ")


def frame(msg_type: MsgType, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise WireError(f"payload of {len(payload)} bytes exceeds the frame limit")
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload)) + payload


def parse_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) != HEADER.size:
        raise WireError(f"short header: {len(header)} bytes")
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise WireError(f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise WireError(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise WireError(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise WireError(f"declared payload of {length} bytes exceeds the frame limit")
    return kind, length


# ---------------------------------------------------------------------------
# per-type payload codecs


def _encode_hello(msg: Hello) -> bytes:
    parts = [_HELLO_HEAD.pack(msg.pool_h, msg.pool_w, len(msg.menu))]
    parts += [_HELLO_ENTRY.pack(bid, payload) for bid, payload in msg.menu]
    return b"".join(parts)


def _decode_hello(payload: bytes) -> Hello:
    if len(payload) < _HELLO_HEAD.size:
        raise WireError("hello payload too short")
    pool_h, pool_w, n = _HELLO_HEAD.unpack_from(payload)
    want = _HELLO_HEAD.size + n * _HELLO_ENTRY.size
    if len(payload) != want:
        raise WireError(f"hello payload is {len(payload)} bytes, expected {want}")
    menu = tuple(_HELLO_ENTRY.unpack_from(payload, _HELLO_HEAD.size + k * _HELLO_ENTRY.size)
                 for k in range(n))
    if pool_h < 1 or pool_w < 1:
        raise WireError("hello declares an empty pooling grid")
    return Hello(pool_h, pool_w, menu)


def _encode_observation(msg: Observation) -> bytes:
    qt = msg.tensor
    dims = struct.pack(f"<{len(qt.shape)}I", *qt.shape)
    return (_OBS_HEAD.pack(msg.branch_id, qt.scale, qt.zero_point, len(qt.shape))
            + dims + qt.data.tobytes())


def _decode_observation(payload: bytes) -> Observation:
    if len(payload) < _OBS_HEAD.size:
        raise WireError("observation payload too short")
    branch_id, scale, zero_point, rank = _OBS_HEAD.unpack_from(payload)
    if rank < 1 or rank > MAX_RANK:
        raise WireError(f"observation rank {rank} out of range")
    dims_end = _OBS_HEAD.size + 4 * rank
    if len(payload) < dims_end:
        raise WireError("observation dims truncated")
    shape = struct.unpack_from(f"<{rank}I", payload, _OBS_HEAD.size)
    count = 1
    for d in shape:
        if d < 1:
            raise WireError("observation dimension of zero")
        count *= d
    if count > MAX_PAYLOAD:
        raise WireError("observation larger than the frame limit")
    if len(payload) != dims_end + count:
        raise WireError(f"observation carries {len(payload) - dims_end} code bytes, "
                        f"expected {count}")
    codes = np.frombuffer(payload, dtype=np.uint8, count=count, offset=dims_end).copy()
    try:
        qt = QuantizedTensor(tuple(int(d) for d in shape), codes,
                             float(scale), int(zero_point))
    except Exception as exc:
        raise WireError(f"bad quantized tensor: {exc}") from None
    return Observation(branch_id, qt)


def _encode_reply(msg: DepthReply) -> bytes:
    pooled = np.ascontiguousarray(msg.pooled, dtype=np.float32)
    if pooled.ndim != 2:
        raise WireError("depth reply must be a 2-d grid")
    h, w = pooled.shape
    return _REPLY_HEAD.pack(msg.branch_id, h, w) + pooled.tobytes()


def _decode_reply(payload: bytes) -> DepthReply:
    if len(payload) < _REPLY_HEAD.size:
        raise WireError("depth reply payload too short")
    branch_id, h, w = _REPLY_HEAD.unpack_from(payload)
    want = _REPLY_HEAD.size + 4 * h * w
    if h < 1 or w < 1 or len(payload) != want:
        raise WireError(f"depth reply is {len(payload)} bytes, expected {want}")
    pooled = np.frombuffer(payload, dtype="<f4", offset=_REPLY_HEAD.size).reshape(h, w).copy()
    return DepthReply(branch_id, pooled)


def _encode_stats(msg: Stats) -> bytes:
    return _STATS_BODY.pack(msg.frames_received, msg.observation_payload_bytes,
                            msg.frames_sent, msg.reply_payload_bytes)


def _decode_stats(payload: bytes) -> Stats:
    if len(payload) != _STATS_BODY.size:
        raise WireError(f"stats payload is {len(payload)} bytes, expected "
                        f"{_STATS_BODY.size}")
    return Stats(*_STATS_BODY.unpack(payload))


def _decode_error(payload: bytes) -> Error:
    try:
        return Error(payload.decode("utf-8"))
    except UnicodeDecodeError:
        raise WireError("error message is not valid utf-8") from None


def encode(msg: Message) -> bytes:
    """Message object to a complete frame."""
    if isinstance(msg, Hello):
        return frame(MsgType.HELLO, _encode_hello(msg))
    if isinstance(msg, Observation):
        return frame(MsgType.OBSERVATION, _encode_observation(msg))
    if isinstance(msg, DepthReply):
        return frame(MsgType.DEPTH_REPLY, _encode_reply(msg))
    if isinstance(msg, Stats):
        return frame(MsgType.STATS, _encode_stats(msg))
    if isinstance(msg, Bye):
        return frame(MsgType.BYE, b"")
    if isinstance(msg, Error):
        return frame(MsgType.ERROR, msg.message.encode("utf-8"))
    raise WireError(f"cannot encode {type(msg).__name__}")


def decode_payload(kind: MsgType, payload: bytes) -> Message:
    """Payload bytes to a message object; the header was already parsed."""
    if kind is MsgType.HELLO:
        return _decode_hello(payload)
    if kind is MsgType.OBSERVATION:
        return _decode_observation(payload)
    if kind is MsgType.DEPTH_REPLY:
        return _decode_reply(payload)
    if kind is MsgType.STATS:
        return _decode_stats(payload)
    if kind is MsgType.BYE:
        if payload:
            raise WireError("bye carries no payload")
        return Bye()
    return _decode_error(payload)


def decode(blob: bytes) -> tuple[Message, bytes]:
    """Decode one frame from ``blob``; returns the message and the remainder."""
    kind, length = parse_header(blob[:HEADER.size])
    end = HEADER.size + length
    if len(blob) < end:
        raise WireError(f"frame truncated: {len(blob) - HEADER.size} of {length} "
                        "payload bytes")
    return decode_payload(kind, blob[HEADER.size:end]), blob[end:]


# ---------------------------------------------------------------------------
# stream helpers


def read_exact(fh, n: int, *, eof_ok: bool = False) -> bytes:
    """Read exactly ``n`` bytes from a file-like object or raise ``WireError``.

    With ``eof_ok``, a connection that closes before the first byte returns
    ``b""`` instead; closing mid-read is always an error.
    """
    chunks = []
    remaining = n
    while remaining:
        chunk = fh.read(remaining)
        if not chunk:
            if eof_ok and remaining == n:
                return b""
            raise WireError(f"connection closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(fh) -> Message:
    return read_frame_sized(fh)[0]


def read_frame_sized(fh, *, eof_ok: bool = False) -> tuple[Message | None, int]:
    """Read one frame; returns the message and its wire size, header included.

    With ``eof_ok``, a clean close between frames returns ``(None, 0)``.
    """
    header = read_exact(fh, HEADER.size, eof_ok=eof_ok)
    if not header:
        return None, 0
    kind, length = parse_header(header)
    payload = read_exact(fh, length) if length else b""
    return decode_payload(kind, payload), HEADER.size + length


def write_frame(fh, msg: Message) -> int:
    """Write one frame; returns the number of wire bytes (header included)."""
    blob = encode(msg)
    fh.write(blob)
    fh.flush()
    return len(blob)
