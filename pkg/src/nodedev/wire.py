"""Framed command protocol spoken between the host and its devices.

Every message on the wire is a single frame:

    magic    4 bytes   ASCII "MPND"
    version  u16       always 1 (reserved field, no per-message multiplexing)
    tag      u8        CommandTag
    len      u32       payload byte count
    payload  len bytes

All integers are little-endian and fixed width, so framing is bit-exact
across machines. The host opens exactly one connection per device and
devices never talk to each other. On a connection, host requests and
device replies strictly alternate; the only unsolicited frame is the
device's initial Hello.

Payload layouts (same endianness rules):

    Hello     version u16, kerneltable digest u64, global count u32, device index u32
    Alloc     addr u32, nbytes u64
    Free      addr u32
    Write     addr u32, offset u64, length u64, data bytes
    Read      addr u32, offset u64, length u64
    Data      raw bytes
    Exec      kernel index u32, n u32, n mediary addrs u32 each, scalar len u32, scalar bytes
    Done      status u8 (0 = ok)
    Ack       status u8
    Err       code u8, utf-8 message
    Shutdown  empty
"""

from __future__ import annotations

import enum
import socket
import struct
from typing import Iterable, NamedTuple

from .errors import (
    MalformedPayloadError,
    ProtocolError,
    StreamClosedError,
    TransportError,
    TruncatedStreamError,
)

MAGIC = b"MPND"
VERSION = 1

_HEADER = struct.Struct("<4sHBI")
HEADER_SIZE = _HEADER.size

_HELLO = struct.Struct("<HQII")
_ALLOC = struct.Struct("<IQ")
_FREE = struct.Struct("<I")
_RANGE = struct.Struct("<IQQ")  # addr, offset, length (Write header and Read)
_STATUS = struct.Struct("<B")

# Worker-side error codes carried in Err frames.
ERR_MALFORMED = 1
ERR_TABLE = 2


class CommandTag(enum.IntEnum):
    HELLO = 1
    ALLOC = 2
    FREE = 3
    WRITE = 4
    READ = 5
    EXEC = 6
    SHUTDOWN = 7
    ACK = 8
    DATA = 9
    DONE = 10
    ERR = 11


HOST_TAGS = frozenset({
    CommandTag.ALLOC, CommandTag.FREE, CommandTag.WRITE,
    CommandTag.READ, CommandTag.EXEC, CommandTag.SHUTDOWN,
})
DEVICE_TAGS = frozenset({
    CommandTag.HELLO, CommandTag.ACK, CommandTag.DATA,
    CommandTag.DONE, CommandTag.ERR,
})

# Expected reply for each host command that has one (Shutdown has none;
# a device may answer any command with Err instead).
REPLY_TAG = {
    CommandTag.ALLOC: CommandTag.ACK,
    CommandTag.FREE: CommandTag.ACK,
    CommandTag.WRITE: CommandTag.ACK,
    CommandTag.READ: CommandTag.DATA,
    CommandTag.EXEC: CommandTag.DONE,
}


def encode_frame(tag: CommandTag, payload: bytes = b"") -> bytes:
    """Serialize one frame. Raises ValueError for payloads >= 2**32 bytes."""
    if len(payload) >= 1 << 32:
        raise ValueError(f"payload of {len(payload)} bytes does not fit a u32 length")
    return _HEADER.pack(MAGIC, VERSION, int(tag), len(payload)) + payload


def _read_exact(stream, n: int, mid_frame: bool) -> bytes:
    parts = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if got or mid_frame:
                raise TruncatedStreamError(
                    f"stream ended after {got} of {n} expected bytes")
            raise StreamClosedError("stream closed at a frame boundary")
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def decode_frame(stream) -> tuple[CommandTag, bytes]:
    """Read exactly one frame from a file-like byte source.

    Raises StreamClosedError on clean end of stream, TruncatedStreamError
    on a partial frame, and ProtocolError for bad magic, a bad version,
    or an unknown tag. An unknown tag is reported only after its payload
    has been consumed, so callers may keep using the stream.
    """
    header = _read_exact(stream, HEADER_SIZE, mid_frame=False)
    magic, version, tag, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    payload = _read_exact(stream, payload_len, mid_frame=True) if payload_len else b""
    try:
        return CommandTag(tag), payload
    except ValueError:
        raise ProtocolError(f"unknown command tag {tag}") from None


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def kerneltable_digest(names: Iterable[str]) -> int:
    """FNV-1a 64 over the kernel names joined with single newline bytes.

    Order-sensitive by construction; host and workers compare digests at
    handshake time to catch divergent registration orders.
    """
    h = _FNV_OFFSET
    for b in b"\n".join(name.encode("utf-8") for name in names):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Hello(NamedTuple):
    version: int
    digest: int
    global_count: int
    device_index: int


def pack_hello(digest: int, global_count: int, device_index: int) -> bytes:
    return _HELLO.pack(VERSION, digest, global_count, device_index)


def unpack_hello(payload: bytes) -> Hello:
    return Hello(*_unpack(_HELLO, payload, "Hello"))


def pack_alloc(addr: int, nbytes: int) -> bytes:
    return _ALLOC.pack(addr, nbytes)


def unpack_alloc(payload: bytes) -> tuple[int, int]:
    return _unpack(_ALLOC, payload, "Alloc")


def pack_free(addr: int) -> bytes:
    return _FREE.pack(addr)


def unpack_free(payload: bytes) -> int:
    return _unpack(_FREE, payload, "Free")[0]


def pack_write(addr: int, offset: int, data: bytes) -> bytes:
    return _RANGE.pack(addr, offset, len(data)) + data


def unpack_write(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < _RANGE.size:
        raise MalformedPayloadError("short Write payload")
    addr, offset, length = _RANGE.unpack_from(payload)
    data = payload[_RANGE.size:]
    if len(data) != length:
        raise MalformedPayloadError(
            f"Write declares {length} data bytes but carries {len(data)}")
    return addr, offset, data


def pack_read(addr: int, offset: int, length: int) -> bytes:
    return _RANGE.pack(addr, offset, length)


def unpack_read(payload: bytes) -> tuple[int, int, int]:
    return _unpack(_RANGE, payload, "Read")


class ExecPayload(NamedTuple):
    kernel_index: int
    addrs: tuple[int, ...]
    scalars: bytes


def pack_exec(kernel_index: int, addrs: Iterable[int], scalars: bytes = b"") -> bytes:
    addrs = tuple(addrs)
    return (struct.pack("<II", kernel_index, len(addrs))
            + struct.pack(f"<{len(addrs)}I", *addrs)
            + struct.pack("<I", len(scalars))
            + scalars)


def unpack_exec(payload: bytes) -> ExecPayload:
    try:
        kernel_index, n_addrs = struct.unpack_from("<II", payload, 0)
        addrs = struct.unpack_from(f"<{n_addrs}I", payload, 8)
        (scalar_len,) = struct.unpack_from("<I", payload, 8 + 4 * n_addrs)
    except struct.error as exc:
        raise MalformedPayloadError(f"malformed Exec payload: {exc}") from None
    body = 12 + 4 * n_addrs
    scalars = payload[body:body + scalar_len]
    if len(scalars) != scalar_len or len(payload) != body + scalar_len:
        raise MalformedPayloadError("Exec payload length does not match its fields")
    return ExecPayload(kernel_index, addrs, scalars)


def pack_status(status: int = 0) -> bytes:
    return _STATUS.pack(status)


def unpack_status(payload: bytes) -> int:
    return _unpack(_STATUS, payload, "status")[0]


def pack_err(code: int, message: str) -> bytes:
    return _STATUS.pack(code) + message.encode("utf-8")[:1024]


def unpack_err(payload: bytes) -> tuple[int, str]:
    if not payload:
        raise MalformedPayloadError("empty Err payload")
    return payload[0], payload[1:].decode("utf-8", errors="replace")


def _unpack(fmt: struct.Struct, payload: bytes, what: str):
    try:
        return fmt.unpack(payload)
    except struct.error as exc:
        raise MalformedPayloadError(f"malformed {what} payload: {exc}") from None


class TranscriptEntry(NamedTuple):
    direction: str  # ">" sent by this endpoint, "<" received
    tag: CommandTag
    payload: bytes


class _SocketStream:
    """Minimal .read(n) adapter over a socket, honoring its timeout."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def read(self, n: int) -> bytes:
        return self._sock.recv(n)


class Connection:
    """One framed stream to a peer, with optional transcript recording.

    A connection carries at most one outstanding request at a time; the
    in-flight counter asserts that callers respect the discipline. The
    caller (the host runtime) provides the actual serialization.
    """

    def __init__(self, sock: socket.socket, *, timeout: float | None = None,
                 record: bool = False):
        self._sock = sock
        self._stream = _SocketStream(sock)
        self.transcript: list[TranscriptEntry] | None = [] if record else None
        self._in_flight = 0
        if timeout is not None:
            sock.settimeout(timeout)

    def settimeout(self, timeout: float | None) -> None:
        self._sock.settimeout(timeout)

    def clear_transcript(self) -> None:
        if self.transcript is not None:
            self.transcript.clear()

    def send(self, tag: CommandTag, payload: bytes = b"") -> None:
        frame = encode_frame(tag, payload)
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        if self.transcript is not None:
            self.transcript.append(TranscriptEntry(">", tag, payload))

    def recv(self) -> tuple[CommandTag, bytes]:
        try:
            tag, payload = decode_frame(self._stream)
        except TimeoutError as exc:
            raise TransportError("no reply within the timeout") from exc
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if self.transcript is not None:
            self.transcript.append(TranscriptEntry("<", tag, payload))
        return tag, payload

    def send_request(self, tag: CommandTag, payload: bytes = b"") -> None:
        assert self._in_flight == 0, "request issued while another is in flight"
        self._in_flight = 1
        try:
            self.send(tag, payload)
        except TransportError:
            self._in_flight = 0
            raise

    def recv_reply(self) -> tuple[CommandTag, bytes]:
        assert self._in_flight == 1, "reply awaited with no request in flight"
        try:
            return self.recv()
        finally:
            self._in_flight = 0

    def request(self, tag: CommandTag, payload: bytes = b"") -> tuple[CommandTag, bytes]:
        self.send_request(tag, payload)
        return self.recv_reply()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
