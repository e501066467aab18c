from __future__ import annotations

import io
import math
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offload import protocol as p
from strategies import BY_TYPE, messages


def test_registry_covers_all_fourteen_types():
    assert sorted(p.MESSAGE_TYPES) == list(range(0x0E))
    assert set(BY_TYPE) == set(p.MESSAGE_TYPES.values())


def test_nop_frame_bytes():
    frame = p.encode_frame(p.Nop(1))
    assert frame == bytes.fromhex("09000000" "0100000000000000" "00")
    assert p.decode_frames(frame) == [p.Nop(1)]


def test_write_buffer_payload_length_precedes_payload():
    frame = p.encode_frame(p.WriteBuffer(7, 3, 0, b"\x01\x02\x03\x04\x05"))
    assert frame.endswith(bytes.fromhex("0500000000000000") + b"\x01\x02\x03\x04\x05")
    assert struct.unpack_from("<I", frame)[0] == len(frame) - 4


def test_field_layouts_are_little_endian():
    body = p.encode_body(p.MigrateBuffer(2, 9, 3, (5, 6)))
    assert body == struct.pack("<QBQIHQQ", 2, 0x06, 9, 3, 2, 5, 6)
    body = p.encode_body(p.SetPeerSession(1, 4, b"\xaa" * 16))
    assert body == struct.pack("<QBI", 1, 0x0D, 4) + b"\xaa" * 16
    body = p.encode_body(p.RunKernel(3, "nop", (p.ArgDesc.buffer(1), p.ArgDesc.f64(0.5)), (2,)))
    assert body == (struct.pack("<QBH", 3, 0x08, 3) + b"nop" + struct.pack("<BBQBd", 2, 0, 1, 2, 0.5)
                    + struct.pack("<HQ", 1, 2))
    body = p.encode_body(p.PeerList(4, ("a:1", "bb:2")))
    assert body == struct.pack("<QBHH", 4, 0x0C, 2, 3) + b"a:1" + struct.pack("<H", 4) + b"bb:2"


@settings(max_examples=2000)
@given(messages)
def test_round_trip(msg):
    frame = p.encode_frame(msg)
    assert p.decode_frames(frame) == [msg]
    assert p.encode_frame(msg) == frame


@given(st.lists(messages, max_size=12))
def test_concatenated_frames_decode_in_order(msgs):
    data = b"".join(p.encode_frame(m) for m in msgs)
    assert p.decode_frames(data) == msgs
    assert list(p.iter_frames(io.BytesIO(data))) == msgs


@given(messages)
def test_no_padding(msg):
    populated = 8 + 1
    for codec, value in zip(msg.schema, msg.field_values()):
        out: list[bytes] = []
        codec.pack(value, out)
        populated += len(b"".join(out))
    assert len(p.encode_body(msg)) <= populated + 16


def test_nan_scalar_survives_bitwise():
    msg = p.RunKernel(1, "k", (p.ArgDesc.f64(math.nan),))
    back = p.decode_frames(p.encode_frame(msg))[0]
    assert math.isnan(back.args[0].value)


def test_truncated_prefix():
    with pytest.raises(p.Truncated):
        p.decode_frame(io.BytesIO(b"\x09\x00\x00"))


@given(messages, st.data())
def test_truncated_anywhere(msg, data):
    frame = p.encode_frame(msg)
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(p.Truncated):
        p.decode_frame(io.BytesIO(frame[:cut]))


def test_unknown_type():
    body = struct.pack("<QB", 1, 0xFF)
    with pytest.raises(p.UnknownType):
        p.decode_frames(struct.pack("<I", len(body)) + body)


def test_trailing_bytes_rejected():
    body = p.encode_body(p.Nop(1)) + b"\x00"
    with pytest.raises(p.SchemaViolation):
        p.decode_frames(struct.pack("<I", len(body)) + body)


def test_short_body_rejected():
    with pytest.raises(p.SchemaViolation):
        p.decode_frames(struct.pack("<I", 3) + b"abc")


def test_push_content_len_must_match():
    with pytest.raises(p.SchemaViolation):
        p.encode_frame(p.PushBuffer(1, 2, 5, 3, b"abc"))


def test_out_of_range_field():
    with pytest.raises(p.SchemaViolation):
        p.encode_frame(p.CreateBuffer(1, 2, 2**64))
    with pytest.raises(p.SchemaViolation):
        p.encode_frame(p.MigrateBuffer(1, 2, 2**32))


def test_control_body_cap():
    big = p.PeerList(1, ("x" * 60000,) * 300)
    with pytest.raises(p.SchemaViolation):
        p.encode_frame(big)
    # A corrupted length prefix on a control frame is rejected before reading the body.
    header = struct.pack("<IQB", (1 << 24) + 1, 1, 0x00)
    with pytest.raises(p.SchemaViolation):
        p.decode_frame(io.BytesIO(header))


def test_payload_frames_may_exceed_cap():
    payload = bytes(range(256)) * ((1 << 24) // 256 + 1)
    msg = p.WriteBuffer(1, 2, 0, payload)
    assert p.decode_frames(p.encode_frame(msg)) == [msg]


def test_handshake_layout():
    raw = p.encode_handshake(p.Handshake(p.Role.CLIENT, p.ZERO_SESSION))
    assert len(raw) == 23
    assert raw[:4] == b"EOFD"
    assert raw == b"EOFD" + struct.pack("<HB", p.VERSION, 0) + bytes(16)
    assert p.decode_handshake(raw) == p.Handshake(p.Role.CLIENT, p.ZERO_SESSION)


def test_handshake_reply_layout():
    sid = p.new_session_id()
    raw = p.encode_handshake_reply(p.HandshakeReply(p.Role.PEER, sid, p.HandshakeStatus.RESUMED))
    assert len(raw) == 24
    assert raw[-1] == 1
    assert p.decode_handshake_reply(raw).session_id == sid


def test_handshake_errors():
    raw = p.encode_handshake(p.Handshake(p.Role.CLIENT, p.ZERO_SESSION))
    with pytest.raises(p.BadMagic):
        p.decode_handshake(b"XXXX" + raw[4:])
    with pytest.raises(p.VersionMismatch):
        p.decode_handshake(raw[:4] + struct.pack("<H", p.VERSION + 1) + raw[6:])
    with pytest.raises(p.Truncated):
        p.read_handshake(io.BytesIO(raw[:10]))


def test_session_ids_are_never_zero():
    ids = {p.new_session_id() for _ in range(200)}
    assert p.ZERO_SESSION not in ids
    assert all(len(i) == 16 for i in ids)
    assert len(ids) == 200
