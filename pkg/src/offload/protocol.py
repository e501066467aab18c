"""Wire protocol shared by clients, daemons and peer links.

Every connection starts with a fixed-size handshake, then carries frames:

    +-----------------+-----------------+-------------+------------------+
    | body_len  u32   | command_id  u64 | msg_type u8 | type fields ...  |
    +-----------------+-----------------+-------------+------------------+

All integers are little-endian.  ``body_len`` counts every byte after the
length prefix.  Each message type serializes only its own fields; buffer
contents travel as the final field, prefixed by a u64 length.

Handshake request (23 bytes): magic ``EOFD`` | version u16 | role u8 |
session id (16 bytes).  The reply repeats that layout and appends a status
byte.
"""

from __future__ import annotations

import enum
import io
import secrets
import struct
from dataclasses import dataclass, fields
from typing import Any, BinaryIO, ClassVar, Iterator

MAGIC = b"EOFD"
VERSION = 1
SESSION_ID_LEN = 16
ZERO_SESSION = bytes(SESSION_ID_LEN)

LENGTH_PREFIX = struct.Struct("<I")
ENVELOPE = struct.Struct("<QB")
HANDSHAKE = struct.Struct("<4sHB16s")
HANDSHAKE_REPLY = struct.Struct("<4sHB16sB")

# Control bodies above this size indicate a corrupt length prefix.
MAX_CONTROL_BODY = 1 << 24
MAX_BODY = (1 << 32) - 1


class ProtocolError(Exception):
    """Base class for wire format errors."""


class Truncated(ProtocolError):
    """The stream ended in the middle of a handshake or frame."""


class UnknownType(ProtocolError):
    pass


class SchemaViolation(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class Role(enum.IntEnum):
    CLIENT = 0
    PEER = 1


class HandshakeStatus(enum.IntEnum):
    NEW = 0
    RESUMED = 1
    UNKNOWN_SESSION = 2


class Status(enum.IntEnum):
    """Completion codes carried by Ack and EventComplete."""

    OK = 0
    UNKNOWN_BUFFER = 1
    UNKNOWN_KERNEL = 2
    ARG_MISMATCH = 3
    BUFFER_TOO_SMALL = 4
    STALE_SOURCE = 5
    PEER_UNREACHABLE = 6
    DEPENDENCY_FAILED = 7
    SIZE_BUFFER_TOO_SMALL = 8
    OUT_OF_RANGE = 9
    CYCLE_DETECTED = 10
    DUPLICATE_COMMAND = 11
    INTERNAL = 255


def new_session_id() -> bytes:
    while True:
        sid = secrets.token_bytes(SESSION_ID_LEN)
        if sid != ZERO_SESSION:
            return sid


# --- field codecs -----------------------------------------------------------


class _Int:
    def __init__(self, fmt: str) -> None:
        self.st = struct.Struct("<" + fmt)
        self.size = self.st.size
        self.limit = 1 << (8 * self.size)

    def pack(self, value: int, out: list[bytes]) -> None:
        if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < self.limit:
            raise SchemaViolation(f"{value!r} does not fit in {self.size * 8} bits")
        out.append(self.st.pack(value))

    def unpack(self, buf: memoryview, pos: int) -> tuple[int, int]:
        end = pos + self.size
        if end > len(buf):
            raise SchemaViolation("body ends inside an integer field")
        return self.st.unpack_from(buf, pos)[0], end


U8, U16, U32, U64 = _Int("B"), _Int("H"), _Int("I"), _Int("Q")
_F64 = struct.Struct("<d")


class _Payload:
    """u64 length followed by raw bytes; always the final field."""

    def pack(self, value: bytes, out: list[bytes]) -> None:
        if not isinstance(value, (bytes, bytearray, memoryview)):
            raise SchemaViolation("payload must be bytes")
        out.append(U64.st.pack(len(value)))
        out.append(bytes(value))

    def unpack(self, buf: memoryview, pos: int) -> tuple[bytes, int]:
        n, pos = U64.unpack(buf, pos)
        if pos + n != len(buf):
            raise SchemaViolation(f"payload_len {n} does not match the {len(buf) - pos} bytes left in the body")
        return bytes(buf[pos:]), len(buf)


class _Str16:
    def pack(self, value: str, out: list[bytes]) -> None:
        raw = value.encode("utf-8")
        U16.pack(len(raw), out)
        out.append(raw)

    def unpack(self, buf: memoryview, pos: int) -> tuple[str, int]:
        n, pos = U16.unpack(buf, pos)
        if pos + n > len(buf):
            raise SchemaViolation("string runs past the end of the body")
        try:
            return str(buf[pos:pos + n], "utf-8"), pos + n
        except UnicodeDecodeError as e:
            raise SchemaViolation(f"invalid utf-8: {e}") from None


class _SessionId:
    def pack(self, value: bytes, out: list[bytes]) -> None:
        if not isinstance(value, bytes) or len(value) != SESSION_ID_LEN:
            raise SchemaViolation("session id must be 16 bytes")
        out.append(value)

    def unpack(self, buf: memoryview, pos: int) -> tuple[bytes, int]:
        end = pos + SESSION_ID_LEN
        if end > len(buf):
            raise SchemaViolation("body ends inside a session id")
        return bytes(buf[pos:end]), end


class _List:
    def __init__(self, count: _Int, item: Any) -> None:
        self.count = count
        self.item = item

    def pack(self, value: tuple, out: list[bytes]) -> None:
        self.count.pack(len(value), out)
        for v in value:
            self.item.pack(v, out)

    def unpack(self, buf: memoryview, pos: int) -> tuple[tuple, int]:
        n, pos = self.count.unpack(buf, pos)
        items = []
        for _ in range(n):
            v, pos = self.item.unpack(buf, pos)
            items.append(v)
        return tuple(items), pos


class ArgKind(enum.IntEnum):
    BUFFER = 0
    SCALAR_U64 = 1
    SCALAR_F64 = 2


@dataclass(frozen=True)
class ArgDesc:
    kind: ArgKind
    value: int | float

    @classmethod
    def buffer(cls, buffer_id: int) -> ArgDesc:
        return cls(ArgKind.BUFFER, buffer_id)

    @classmethod
    def u64(cls, value: int) -> ArgDesc:
        return cls(ArgKind.SCALAR_U64, value)

    @classmethod
    def f64(cls, value: float) -> ArgDesc:
        return cls(ArgKind.SCALAR_F64, float(value))


class _Arg:
    def pack(self, value: ArgDesc, out: list[bytes]) -> None:
        U8.pack(int(value.kind), out)
        if value.kind == ArgKind.SCALAR_F64:
            if not isinstance(value.value, float):
                raise SchemaViolation("f64 argument must be a float")
            out.append(_F64.pack(value.value))
        else:
            U64.pack(value.value, out)

    def unpack(self, buf: memoryview, pos: int) -> tuple[ArgDesc, int]:
        kind, pos = U8.unpack(buf, pos)
        if kind not in ArgKind._value2member_map_:
            raise SchemaViolation(f"unknown argument kind {kind}")
        if kind == ArgKind.SCALAR_F64:
            if pos + 8 > len(buf):
                raise SchemaViolation("body ends inside an f64 argument")
            return ArgDesc(ArgKind.SCALAR_F64, _F64.unpack_from(buf, pos)[0]), pos + 8
        value, pos = U64.unpack(buf, pos)
        return ArgDesc(ArgKind(kind), value), pos


PAYLOAD = _Payload()
STR16 = _Str16()
SESSION = _SessionId()
IDS16 = _List(U16, U64)
ARGS8 = _List(U8, _Arg())
ADDRS16 = _List(U16, STR16)


# --- messages ---------------------------------------------------------------

MESSAGE_TYPES: dict[int, type[Message]] = {}


@dataclass(frozen=True)
class Message:
    command_id: int

    msg_type: ClassVar[int]
    schema: ClassVar[tuple[Any, ...]] = ()

    def __init_subclass__(cls, **kw: Any) -> None:
        super().__init_subclass__(**kw)
        if "msg_type" in cls.__dict__:
            MESSAGE_TYPES[cls.msg_type] = cls

    def field_values(self) -> list[Any]:
        return [getattr(self, f.name) for f in fields(self)[1:]]


@dataclass(frozen=True)
class Nop(Message):
    msg_type = 0x00


@dataclass(frozen=True)
class CreateBuffer(Message):
    buffer_id: int
    size: int
    msg_type = 0x01
    schema = (U64, U64)


@dataclass(frozen=True)
class FreeBuffer(Message):
    buffer_id: int
    msg_type = 0x02
    schema = (U64,)


@dataclass(frozen=True)
class WriteBuffer(Message):
    buffer_id: int
    offset: int
    payload: bytes
    msg_type = 0x03
    schema = (U64, U64, PAYLOAD)


@dataclass(frozen=True)
class ReadBuffer(Message):
    buffer_id: int
    offset: int
    len: int
    msg_type = 0x04
    schema = (U64, U64, U64)


@dataclass(frozen=True)
class ReadResult(Message):
    """Reply to ReadBuffer.  ``command_id`` echoes the request's id."""

    buffer_id: int
    payload: bytes
    msg_type = 0x05
    schema = (U64, PAYLOAD)


@dataclass(frozen=True)
class MigrateBuffer(Message):
    buffer_id: int
    dest_server: int
    wait_ids: tuple[int, ...] = ()
    msg_type = 0x06
    schema = (U64, U32, IDS16)


@dataclass(frozen=True)
class PushBuffer(Message):
    buffer_id: int
    content_len: int
    origin_command_id: int
    payload: bytes
    msg_type = 0x07
    schema = (U64, U64, U64, PAYLOAD)


@dataclass(frozen=True)
class RunKernel(Message):
    kernel_name: str
    args: tuple[ArgDesc, ...] = ()
    wait_ids: tuple[int, ...] = ()
    msg_type = 0x08
    schema = (STR16, ARGS8, IDS16)


@dataclass(frozen=True)
class SetContentSizeBuffer(Message):
    buffer_id: int
    size_buffer_id: int
    msg_type = 0x09
    schema = (U64, U64)


@dataclass(frozen=True)
class EventComplete(Message):
    completed_command_id: int
    status: int = 0
    msg_type = 0x0A
    schema = (U64, U8)


@dataclass(frozen=True)
class Ack(Message):
    acked_command_id: int
    status: int = 0
    msg_type = 0x0B
    schema = (U64, U8)


@dataclass(frozen=True)
class PeerList(Message):
    addrs: tuple[str, ...] = ()
    msg_type = 0x0C
    schema = (ADDRS16,)


@dataclass(frozen=True)
class SetPeerSession(Message):
    peer_index: int
    session_id: bytes
    msg_type = 0x0D
    schema = (U32, SESSION)


PAYLOAD_TYPES = frozenset(t for t, cls in MESSAGE_TYPES.items() if PAYLOAD in cls.schema)


def encode_body(msg: Message) -> bytes:
    out: list[bytes] = []
    U64.pack(msg.command_id, out)
    out.append(U8.st.pack(msg.msg_type))
    for codec, value in zip(msg.schema, msg.field_values()):
        codec.pack(value, out)
    if isinstance(msg, PushBuffer) and msg.content_len != len(msg.payload):
        raise SchemaViolation("PushBuffer content_len must equal the payload length")
    return b"".join(out)


def encode_frame(msg: Message) -> bytes:
    """Serialize ``msg`` as a length-prefixed frame."""
    body = encode_body(msg)
    if len(body) > MAX_BODY or (len(body) > MAX_CONTROL_BODY and msg.msg_type not in PAYLOAD_TYPES):
        raise SchemaViolation(f"body of {len(body)} bytes exceeds the frame limit")
    return LENGTH_PREFIX.pack(len(body)) + body


def decode_body(body: bytes | memoryview) -> Message:
    buf = memoryview(body)
    if len(buf) < ENVELOPE.size:
        raise SchemaViolation(f"body of {len(buf)} bytes is shorter than the envelope")
    command_id, msg_type = ENVELOPE.unpack_from(buf, 0)
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise UnknownType(f"unknown msg_type 0x{msg_type:02x}")
    pos = ENVELOPE.size
    values = []
    for codec in cls.schema:
        v, pos = codec.unpack(buf, pos)
        values.append(v)
    if pos != len(buf):
        raise SchemaViolation(f"{len(buf) - pos} trailing bytes after {cls.__name__}")
    msg = cls(command_id, *values)
    if isinstance(msg, PushBuffer) and msg.content_len != len(msg.payload):
        raise SchemaViolation("PushBuffer content_len must equal the payload length")
    return msg


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if data is None or len(data) < n:
        raise Truncated(f"expected {n} bytes, got {0 if data is None else len(data)}")
    return data


def decode_frame(stream: BinaryIO) -> Message:
    """Read exactly one frame from ``stream`` (anything with ``read(n)``)."""
    (body_len,) = LENGTH_PREFIX.unpack(_read_exact(stream, LENGTH_PREFIX.size))
    if body_len < ENVELOPE.size:
        raise SchemaViolation(f"body_len {body_len} is shorter than the envelope")
    if body_len > MAX_CONTROL_BODY:
        # Only payload-bearing types may be this large; check before reading the rest.
        head = _read_exact(stream, ENVELOPE.size)
        msg_type = head[8]
        if msg_type not in MESSAGE_TYPES:
            raise UnknownType(f"unknown msg_type 0x{msg_type:02x}")
        if msg_type not in PAYLOAD_TYPES:
            raise SchemaViolation(f"control body of {body_len} bytes exceeds {MAX_CONTROL_BODY}")
        return decode_body(head + _read_exact(stream, body_len - ENVELOPE.size))
    return decode_body(_read_exact(stream, body_len))


def decode_frames(data: bytes) -> list[Message]:
    """Decode a byte string holding zero or more complete frames."""
    stream = io.BytesIO(data)
    out = []
    while stream.tell() < len(data):
        out.append(decode_frame(stream))
    return out


def iter_frames(stream: BinaryIO) -> Iterator[Message]:
    while True:
        try:
            yield decode_frame(stream)
        except Truncated:
            return


# --- handshake --------------------------------------------------------------


@dataclass(frozen=True)
class Handshake:
    role: Role
    session_id: bytes = ZERO_SESSION
    version: int = VERSION
    magic: bytes = MAGIC


@dataclass(frozen=True)
class HandshakeReply:
    role: Role
    session_id: bytes
    status: HandshakeStatus
    version: int = VERSION
    magic: bytes = MAGIC


def _check_header(magic: bytes, version: int) -> None:
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"peer speaks version {version}, expected {VERSION}")


def encode_handshake(h: Handshake) -> bytes:
    if h.magic != MAGIC:
        raise BadMagic(f"bad magic {h.magic!r}")
    if len(h.session_id) != SESSION_ID_LEN:
        raise SchemaViolation("session id must be 16 bytes")
    return HANDSHAKE.pack(h.magic, h.version, int(h.role), h.session_id)


def decode_handshake(data: bytes) -> Handshake:
    if len(data) < HANDSHAKE.size:
        raise Truncated("short handshake")
    magic, version, role, sid = HANDSHAKE.unpack(data[:HANDSHAKE.size])
    _check_header(magic, version)
    try:
        return Handshake(Role(role), sid, version, magic)
    except ValueError:
        raise SchemaViolation(f"unknown role {role}") from None


def encode_handshake_reply(r: HandshakeReply) -> bytes:
    return HANDSHAKE_REPLY.pack(r.magic, r.version, int(r.role), r.session_id, int(r.status))


def decode_handshake_reply(data: bytes) -> HandshakeReply:
    if len(data) < HANDSHAKE_REPLY.size:
        raise Truncated("short handshake reply")
    magic, version, role, sid, status = HANDSHAKE_REPLY.unpack(data[:HANDSHAKE_REPLY.size])
    _check_header(magic, version)
    try:
        return HandshakeReply(Role(role), sid, HandshakeStatus(status), version, magic)
    except ValueError:
        raise SchemaViolation(f"bad handshake reply role={role} status={status}") from None


def read_handshake(stream: BinaryIO) -> Handshake:
    return decode_handshake(_read_exact(stream, HANDSHAKE.size))


def read_handshake_reply(stream: BinaryIO) -> HandshakeReply:
    return decode_handshake_reply(_read_exact(stream, HANDSHAKE_REPLY.size))
