from __future__ import annotations

import socket
import struct

import pytest

from offload import protocol as p
from offload.client import ServerConfig, connect
from offload.peer_mesh import LinkDown, LinkState, PeerMesh
from conftest import wait_until
from rawwire import RawClient


def _ready(ds, n):
    return all(
        len(s.mesh.links) == n - 1 and all(st == LinkState.READY for st in s.mesh.states().values())
        for d in ds for s in d.sessions.values()
    )


def _free_port_addr() -> str:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    addr = "127.0.0.1:%d" % s.getsockname()[1]
    s.close()
    return addr


def test_full_mesh_forms(cluster):
    ctx, ds = cluster(3)
    assert wait_until(lambda: _ready(ds, 3))


def test_resent_peer_list_is_idempotent(cluster):
    ctx, ds = cluster(3)
    assert wait_until(lambda: _ready(ds, 3))
    links = {id(l) for d in ds for s in d.sessions.values() for l in s.mesh.links.values()}
    conns = sum(len(d.connections) for d in ds)
    for ref in ctx.servers:
        for ev in ctx._send_mesh_setup(ref):
            ev.wait(5)
    assert {id(l) for d in ds for s in d.sessions.values() for l in s.mesh.links.values()} == links
    assert sum(len(d.connections) for d in ds) == conns
    assert all(l.connects == 1 for d in ds for s in d.sessions.values() for l in s.mesh.links.values())


def test_unreachable_peer_is_independent(start_daemons):
    d = start_daemons(1)[0]
    remote = RawClient(d.address)  # gives the good daemon a session to bind to
    mesh = PeerMesh(b"\x07" * 16, on_push_failed=lambda push: None)
    try:
        mesh.apply_peer_list(("self:0", d.address, _free_port_addr()),
                             {0: b"\x07" * 16, 1: remote.session, 2: b"\x09" * 16})
        assert wait_until(lambda: mesh.states() == {1: LinkState.READY, 2: LinkState.DISCONNECTED})
        with pytest.raises(LinkDown):
            mesh.link(2).send_push(p.PushBuffer(0, 1, 1, 5, b"x"))
        with pytest.raises(LinkDown):
            mesh.link(7)
    finally:
        mesh.close()


def test_one_completion_per_peer(cluster):
    ctx, ds = cluster(3)
    assert wait_until(lambda: _ready(ds, 3))
    before = ds[0].stats()["completions_sent"]
    for _ in range(10):
        ctx.enqueue_kernel(0, "nop")
    assert ctx.finish() == ctx.finish()
    assert wait_until(lambda: ds[0].stats()["completions_sent"] - before == 10 * 2)


def test_cross_server_wait_list(cluster):
    ctx, ds = cluster(2)
    a = ctx.create_buffer(4)
    b = ctx.create_buffer(4)
    ctx.write_buffer(a, struct.pack("<i", 1), server=0)
    ctx.write_buffer(b, struct.pack("<i", 5), server=1)
    first = ctx.enqueue_kernel(0, "increment_first_i32", [a])
    second = ctx.enqueue_kernel(1, "increment_first_i32", [b], [first])
    assert second.wait(5).name == "COMPLETE"
    session = next(iter(ds[1].sessions.values()))
    assert session.graph.status(first.command_id).terminal
    assert struct.unpack("<i", ctx.read_buffer(b))[0] == 6


def test_migration_keeps_payload_off_client_links(cluster):
    ctx, ds = cluster(2)
    size = 1 << 20
    buf = ctx.create_buffer(size)
    ctx.write_buffer(buf, bytes(range(256)) * (size // 256), server=0)
    ctx.finish()
    cin, cout = ctx.client_bytes()
    ctx.enqueue_migration(buf, 1).wait()
    assert sum(ctx.client_bytes()) - cin - cout < 512
    assert ds[0].stats()["push_payload_lens"] == [size]


def test_completions_replayed_after_peer_link_drop(cluster):
    ctx, ds = cluster(2)
    assert wait_until(lambda: _ready(ds, 2))
    link = next(iter(ds[0].sessions.values())).mesh.link(1)
    link.conn.close()
    assert wait_until(lambda: link.connects == 2 and link.state == LinkState.READY)
    buf = ctx.create_buffer(4)
    ctx.write_buffer(buf, bytes(4), server=0)
    for i in range(6):
        ctx.enqueue_kernel(i % 2, "increment_first_i32", [buf])
    assert ctx.finish(10).name == "COMPLETE"
    assert struct.unpack("<i", ctx.read_buffer(buf))[0] == 6


def test_separate_peer_listener(start_daemons):
    ds = start_daemons(2, peer_listen="127.0.0.1:0")
    assert ds[0].peer_address != ds[0].address
    configs = [ServerConfig(d.address, d.peer_address) for d in ds]
    with connect(configs) as ctx:
        buf = ctx.create_buffer(4)
        ctx.write_buffer(buf, bytes(4), server=0)
        ctx.enqueue_kernel(1, "increment_first_i32", [buf])
        assert ctx.read_buffer(buf) == b"\x01\x00\x00\x00"
        assert ds[0].stats()["pushes_sent"] == 1
