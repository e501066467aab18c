from __future__ import annotations

import hashlib
import struct
import time

import pytest

from offload import protocol as p
from offload.protocol import (Ack, ArgDesc, CreateBuffer, FreeBuffer, HandshakeStatus, MigrateBuffer, Nop,
                              ReadBuffer, ReadResult, RunKernel, SetContentSizeBuffer, Status, WriteBuffer)
from rawwire import RawClient


@pytest.fixture
def daemon(start_daemons):
    return start_daemons(1)[0]


def test_new_session(daemon):
    c = RawClient(daemon.address)
    assert c.reply.status == HandshakeStatus.NEW
    assert c.session != p.ZERO_SESSION
    assert c.reply.magic == p.MAGIC if hasattr(c.reply, "magic") else True
    assert c.call(Nop(1)) == Ack(1, 1, 0) or c.call(Nop(2)).status == 0


def test_nop_ack_and_no_peer_traffic(daemon):
    c = RawClient(daemon.address)
    reply = c.call(RunKernel(1, "nop"))
    assert isinstance(reply, Ack) and reply.acked_command_id == 1 and reply.status == Status.OK
    assert daemon.stats()["completions_sent"] == 0


def test_resume_keeps_buffers(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 7, 4), WriteBuffer(2, 7, 0, b"abcd"))
    c.replies(2)
    c.close()
    c2 = RawClient(daemon.address, c.session)
    assert c2.reply.status == HandshakeStatus.RESUMED
    assert c2.reply.session_id == c.session
    # The resumed connection first receives the cached replies again.
    c2.replies(2)
    assert c2.call(ReadBuffer(3, 7, 0, 4)) == ReadResult(3, 7, b"abcd")


def test_unknown_session(daemon):
    bogus = b"\x01" * 16
    c = RawClient(daemon.address, bogus)
    assert c.reply.status == HandshakeStatus.UNKNOWN_SESSION
    assert c.session not in (bogus, p.ZERO_SESSION)


def test_replayed_write_is_not_executed_twice(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 5, 8), WriteBuffer(2, 5, 0, b"12345678"))
    first = c.replies(2)
    before = hashlib.sha256(c.call(ReadBuffer(3, 5, 0, 8)).payload).digest()
    c.send(WriteBuffer(2, 5, 0, b"XXXXXXXX"))
    assert c.replies(1)[2] == first[2]
    assert hashlib.sha256(c.call(ReadBuffer(4, 5, 0, 8)).payload).digest() == before


def test_replayed_increment_counts_once(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 5, 4))
    inc = [RunKernel(i, "increment_first_i32", (ArgDesc.buffer(5),)) for i in range(2, 12)]
    c.send(*inc)
    c.replies(11)
    c.send(*inc[3:])  # a replayed suffix
    c.replies(len(inc) - 3)
    assert struct.unpack("<i", c.call(ReadBuffer(20, 5, 0, 4)).payload)[0] == 10


@pytest.mark.parametrize("msg, status", [
    (ReadBuffer(2, 99, 0, 1), Status.UNKNOWN_BUFFER),
    (FreeBuffer(2, 99), Status.UNKNOWN_BUFFER),
    (RunKernel(2, "bogus"), Status.UNKNOWN_KERNEL),
    (RunKernel(2, "increment_first_i32", ()), Status.ARG_MISMATCH),
    (RunKernel(2, "increment_first_i32", (ArgDesc.u64(1),)), Status.ARG_MISMATCH),
    (RunKernel(2, "increment_first_i32", (ArgDesc.buffer(1),)), Status.BUFFER_TOO_SMALL),
    (ReadBuffer(2, 1, 1, 2), Status.OUT_OF_RANGE),
    (WriteBuffer(2, 1, 2, b"ab"), Status.OUT_OF_RANGE),
    (SetContentSizeBuffer(2, 1, 1), Status.SIZE_BUFFER_TOO_SMALL),
    (MigrateBuffer(2, 1, 3), Status.STALE_SOURCE),
    (RunKernel(2, "nop", (), (2,)), Status.CYCLE_DETECTED),
])
def test_error_acks(daemon, msg, status):
    c = RawClient(daemon.address)
    assert c.call(CreateBuffer(1, 1, 2)).status == Status.OK
    assert c.call(msg).status == status


def test_migration_without_peer_fails(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 1, 4), WriteBuffer(2, 1, 0, b"abcd"))
    c.replies(2)
    assert c.call(MigrateBuffer(3, 1, 5)).status == Status.PEER_UNREACHABLE
    # The source keeps its copy.
    assert c.call(ReadBuffer(4, 1, 0, 4)).payload == b"abcd"


def test_dependency_failure_propagates(daemon):
    c = RawClient(daemon.address)
    c.send(RunKernel(1, "bogus"), RunKernel(2, "nop", (), (1,)), RunKernel(3, "nop", (), (2,)))
    got = c.replies(3)
    assert got[1].status == Status.UNKNOWN_KERNEL
    assert got[2].status == Status.DEPENDENCY_FAILED
    assert got[3].status == Status.DEPENDENCY_FAILED


def test_implicit_ordering_on_buffers(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 1, 4), WriteBuffer(2, 1, 0, b"\x05\x00\x00\x00"),
           RunKernel(3, "increment_first_i32", (ArgDesc.buffer(1),)), ReadBuffer(4, 1, 0, 4))
    got = c.replies(4)
    assert got[4].payload == b"\x06\x00\x00\x00"


def test_malformed_frame_is_isolated(daemon):
    good = RawClient(daemon.address)
    good.call(CreateBuffer(1, 1, 4))
    bad = RawClient(daemon.address)
    body = struct.pack("<QB", 1, 0xEE)
    bad.stream.write(struct.pack("<I", len(body)) + body)
    assert bad.closed_by_peer()
    assert good.call(WriteBuffer(2, 1, 0, b"okay")).status == Status.OK
    assert good.call(ReadBuffer(3, 1, 0, 4)).payload == b"okay"


def test_garbage_handshake_does_not_crash(daemon):
    import socket
    s = socket.create_connection(p.parse_addr(daemon.address) if hasattr(p, "parse_addr") else
                                 (daemon.address.split(":")[0], int(daemon.address.split(":")[1])))
    s.sendall(b"NOPE" + bytes(19))
    s.settimeout(5)
    assert s.recv(1) == b""
    assert RawClient(daemon.address).reply.status == HandshakeStatus.NEW


def test_session_isolation(daemon):
    a, b = RawClient(daemon.address), RawClient(daemon.address)
    for c, data in ((a, b"AAAA"), (b, b"BBBB")):
        c.send(CreateBuffer(1, 42, 4), WriteBuffer(2, 42, 0, data))
        c.replies(2)
    assert a.call(ReadBuffer(3, 42, 0, 4)).payload == b"AAAA"
    assert b.call(ReadBuffer(3, 42, 0, 4)).payload == b"BBBB"


def test_result_cache_is_bounded(daemon):
    c = RawClient(daemon.address)
    c.send(*[Nop(i) for i in range(1, 301)])
    c.replies(300)
    session = daemon.sessions[c.session]
    assert len(session.result_cache) == 128
    assert min(session.result_cache) == 173


def test_content_size_clamps_and_relinks(start_daemons):
    from offload.client import connect

    d0, d1 = start_daemons(2)
    with connect([d0.address, d1.address]) as ctx:
        data = bytes(range(256)) * 16
        buf = ctx.create_buffer(len(data))
        s1, s2 = ctx.create_buffer(8), ctx.create_buffer(8)
        ctx.write_buffer(buf, data, server=0)
        ctx.write_buffer(s1, struct.pack("<Q", 100), server=0)
        ctx.write_buffer(s2, struct.pack("<Q", 10**9), server=0)
        ctx.set_content_size(buf, s1)
        ctx.enqueue_migration(buf, 1).wait()
        ctx.set_content_size(buf, s2)  # latest link wins; value is clamped
        ctx.enqueue_migration(buf, 0).wait()
        assert ctx.finish() == ctx.finish()
        lens = d0.stats()["push_payload_lens"] + d1.stats()["push_payload_lens"]
        assert 100 in lens and len(data) in lens
        assert ctx.read_buffer(buf, 0, 100) == data[:100]


def test_idle_daemon_shutdown_is_quick(start_daemons):
    d = start_daemons(1)[0]
    t0 = time.monotonic()
    d.shutdown()
    assert time.monotonic() - t0 < 2.0


def test_failed_kernel_does_not_poison_buffer(daemon):
    c = RawClient(daemon.address)
    c.send(CreateBuffer(1, 1, 4),
           RunKernel(2, "matmul_rows_f32", (ArgDesc.buffer(1),) * 3 + (ArgDesc.u64(4), ArgDesc.u64(0), ArgDesc.u64(1))),
           RunKernel(3, "increment_first_i32", (ArgDesc.buffer(1),)),
           ReadBuffer(4, 1, 0, 4))
    got = c.replies(4)
    assert got[2].status == Status.BUFFER_TOO_SMALL
    assert got[3].status == Status.OK
    assert got[4].payload == b"\x01\x00\x00\x00"
