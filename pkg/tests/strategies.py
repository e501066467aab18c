"""Hypothesis strategies producing schema-valid instances of every message type."""

from __future__ import annotations

from hypothesis import strategies as st

from offload import protocol as p

u8 = st.integers(0, 2**8 - 1)
u16 = st.integers(0, 2**16 - 1)
u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
payloads = st.binary(max_size=512)
sessions = st.binary(min_size=16, max_size=16)
wait_lists = st.lists(u64, max_size=20).map(tuple)
names = st.text(max_size=40)
addrs = st.lists(st.text(max_size=30), max_size=6).map(tuple)

arg_descs = st.one_of(
    u64.map(p.ArgDesc.buffer),
    u64.map(p.ArgDesc.u64),
    st.floats(allow_nan=False).map(p.ArgDesc.f64),
)


def _push(cid: int, buffer_id: int, origin: int, payload: bytes) -> p.PushBuffer:
    return p.PushBuffer(cid, buffer_id, len(payload), origin, payload)


BY_TYPE = {
    p.Nop: st.builds(p.Nop, u64),
    p.CreateBuffer: st.builds(p.CreateBuffer, u64, u64, u64),
    p.FreeBuffer: st.builds(p.FreeBuffer, u64, u64),
    p.WriteBuffer: st.builds(p.WriteBuffer, u64, u64, u64, payloads),
    p.ReadBuffer: st.builds(p.ReadBuffer, u64, u64, u64, u64),
    p.ReadResult: st.builds(p.ReadResult, u64, u64, payloads),
    p.MigrateBuffer: st.builds(p.MigrateBuffer, u64, u64, u32, wait_lists),
    p.PushBuffer: st.builds(_push, u64, u64, u64, payloads),
    p.RunKernel: st.builds(p.RunKernel, u64, names, st.lists(arg_descs, max_size=12).map(tuple), wait_lists),
    p.SetContentSizeBuffer: st.builds(p.SetContentSizeBuffer, u64, u64, u64),
    p.EventComplete: st.builds(p.EventComplete, u64, u64, u8),
    p.Ack: st.builds(p.Ack, u64, u64, u8),
    p.PeerList: st.builds(p.PeerList, u64, addrs),
    p.SetPeerSession: st.builds(p.SetPeerSession, u64, u32, sessions),
}

messages = st.one_of(*BY_TYPE.values())
