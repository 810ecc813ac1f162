"""Envelope type and the normative wire frame layout.

One codec serves both channels; the in-process channel skips payload
serialization entirely and only the byte-stream channel frames tensors.

Frame layout (all little-endian, bit-exact; alternate-language clients can
interoperate from this description alone):

    offset  size  field
    0       4     magic, b"LSV1"
    4       2     version, u16 (currently 1)
    6       4     client_id, u32
    10      8     request_id, u64 (strictly increasing per client)
    18      2     layer block, u16
    20      1     layer role, u8 (Q=0 K=1 V=2 O=3 FF_UP=4 FF_DOWN=5 LM_HEAD=6)
    21      1     pass, u8 (see PASS_* below)
    22      4     token_count, u32
    26      4     width, u32
    30      ...   payload: token_count * width little-endian f32 values
                  (for PASS_ERROR: token_count bytes of utf-8 message,
                  width must be 0)

Unknown magic or version is a connection-level rejection; no stream
resynchronization is attempted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import LayerAddress, Role
from .errors import ProtocolError

MAGIC = b"LSV1"
VERSION = 1

PASS_FORWARD = 0
PASS_BACKWARD = 1
PASS_NOISE_EFFECT = 2
# control-plane values; payload is empty except for PASS_ERROR
PASS_REGISTER = 16
PASS_DEREGISTER = 17
PASS_ACK = 32
PASS_ERROR = 255

COMPUTE_PASSES = (PASS_FORWARD, PASS_BACKWARD, PASS_NOISE_EFFECT)

HEADER = struct.Struct("<4sHIQHBBII")
HEADER_SIZE = HEADER.size  # 30 bytes


@dataclass
class Envelope:
    """One client -> executor message (or its reply)."""

    client_id: int
    request_id: int
    block: int
    role: int
    pass_kind: int
    payload: np.ndarray  # [token_count, width] f32; may be empty

    @property
    def token_count(self) -> int:
        return self.payload.shape[0]

    @property
    def width(self) -> int:
        return self.payload.shape[1] if self.payload.ndim == 2 else 0

    @property
    def layer(self) -> LayerAddress:
        return LayerAddress(self.block, Role(self.role))


def control_envelope(client_id: int, request_id: int, pass_kind: int,
                     flag: int = 0) -> Envelope:
    """Register/deregister/ack frame; `flag` rides in the role field."""
    return Envelope(client_id, request_id, 0, flag, pass_kind,
                    np.empty((0, 0), dtype=np.float32))


def error_envelope(like: Envelope, message: str) -> Envelope:
    data = np.frombuffer(message.encode("utf-8"), dtype=np.uint8)
    return Envelope(like.client_id, like.request_id, like.block, like.role,
                    PASS_ERROR, data)


def error_message(env: Envelope) -> str:
    return env.payload.tobytes().decode("utf-8", errors="replace")


def encode(env: Envelope) -> bytes:
    if env.pass_kind == PASS_ERROR:
        body = env.payload.tobytes()
        token_count, width = len(body), 0
    else:
        payload = np.ascontiguousarray(env.payload, dtype="<f4")
        body = payload.tobytes()
        token_count, width = env.token_count, env.width
    header = HEADER.pack(MAGIC, VERSION, env.client_id, env.request_id,
                         env.block, env.role, env.pass_kind, token_count, width)
    return header + body


def _payload_size(pass_kind: int, token_count: int, width: int) -> int:
    if pass_kind == PASS_ERROR:
        return token_count
    return 4 * token_count * width


def decode(buf: bytes | memoryview) -> tuple[Envelope, int]:
    """Decode one frame from the head of buf; returns (envelope, consumed).

    Raises ProtocolError on truncation, bad magic, or unknown version.
    """
    result = try_decode(buf)
    if result is None:
        raise ProtocolError("truncated frame")
    return result


def try_decode(buf: bytes | memoryview) -> tuple[Envelope, int] | None:
    """Like decode, but returns None when the frame is merely incomplete.

    Bad magic/version still raise: a corrupt stream cannot be resumed.
    """
    buf = memoryview(buf)
    if len(buf) < HEADER_SIZE:
        if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
            raise ProtocolError(f"bad magic {bytes(buf[:4])!r}")
        return None
    magic, version, client_id, request_id, block, role, pass_kind, \
        token_count, width = HEADER.unpack(buf[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    size = _payload_size(pass_kind, token_count, width)
    total = HEADER_SIZE + size
    if len(buf) < total:
        return None
    raw = bytes(buf[HEADER_SIZE:total])
    if pass_kind == PASS_ERROR:
        payload = np.frombuffer(raw, dtype=np.uint8)
    else:
        payload = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=False)
        payload = payload.reshape(token_count, width)
    env = Envelope(client_id, request_id, block, role, pass_kind, payload)
    return env, total
