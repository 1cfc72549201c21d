"""Length-prefixed framing for raw byte streams.

WebSocket transports already delimit messages; this layer exists for anything
speaking over a bare stream (pipes, TCP) and for tools that persist message
logs. Each frame is a big-endian u32 payload length followed by the payload.
"""

from __future__ import annotations

import struct

from gradloom.protocol.messages import MAX_FRAME_BYTES

_PREFIX = struct.Struct(">I")


class FrameError(ValueError):
    """Oversized or structurally impossible frame; the stream is unrecoverable."""


def encode_frame(payload: bytes, max_bytes: int = MAX_FRAME_BYTES) -> bytes:
    if len(payload) > max_bytes:
        raise FrameError(f"payload is {len(payload)} bytes, cap is {max_bytes}")
    return _PREFIX.pack(len(payload)) + payload


class FrameDecoder:
    """Incremental splitter: feed arbitrary chunks, get whole payloads back.

    A declared length over the cap poisons the decoder; every later feed
    raises, because the stream offset can no longer be trusted.
    """

    def __init__(self, max_bytes: int = MAX_FRAME_BYTES) -> None:
        self.max_bytes = max_bytes
        self._buf = bytearray()
        self._dead = False

    def feed(self, chunk: bytes) -> list[bytes]:
        if self._dead:
            raise FrameError("decoder poisoned by an earlier oversized frame")
        self._buf.extend(chunk)
        out: list[bytes] = []
        while True:
            if len(self._buf) < _PREFIX.size:
                return out
            (length,) = _PREFIX.unpack_from(self._buf)
            if length > self.max_bytes:
                self._dead = True
                raise FrameError(f"declared frame length {length} exceeds cap {self.max_bytes}")
            if len(self._buf) < _PREFIX.size + length:
                return out
            out.append(bytes(self._buf[_PREFIX.size : _PREFIX.size + length]))
            del self._buf[: _PREFIX.size + length]

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
