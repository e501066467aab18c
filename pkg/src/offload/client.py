"""Host-side runtime: buffers, kernel enqueue, implicit migration and reconnects.

A :class:`Context` talks to one or more daemons.  Every buffer has a single
latest location (the host or one server); enqueueing a kernel on a server
first moves each buffer argument there, server-to-server transfers going
over the peer mesh so their bytes never cross the client link.

Lost connections are retried in the background.  While a server is down,
every call touching it raises :class:`DeviceUnavailable` without writing
anything; once the session is resumed, unacknowledged commands are re-sent
oldest first and the daemon drops the ones it already ran.
"""

from __future__ import annotations

import itertools
import contextlib
import logging
import os
import socket
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import kernels, protocol
from .event_graph import Kind, Status, TaskGraph
from .kernels import Access
from .protocol import (
    Ack,
    ArgDesc,
    ArgKind,
    CreateBuffer,
    FreeBuffer,
    HandshakeStatus,
    Message,
    MigrateBuffer,
    Nop,
    PeerList,
    ReadBuffer,
    ReadResult,
    Role,
    RunKernel,
    SetContentSizeBuffer,
    SetPeerSession,
    WriteBuffer,
)
from .transport import SocketStream, close_socket, dial

log = logging.getLogger(__name__)

REPLAY_RING = 32
RECONNECT_DEADLINE = 30.0
BACKOFF_START = 0.01
BACKOFF_MAX = 0.5
SERVERS_ENV = "OFFLOAD_SERVERS"


class OffloadError(Exception):
    pass


class DeviceUnavailable(OffloadError):
    pass


class SessionLost(DeviceUnavailable):
    pass


class AllServersUnreachable(OffloadError):
    pass


class UnknownBuffer(OffloadError):
    pass


class CommandFailed(OffloadError):
    def __init__(self, event: Event) -> None:
        super().__init__(f"command {event.command_id} on server {event.server} ended {event.status.name}"
                         f" ({event.error.name})")
        self.event = event


@dataclass(frozen=True)
class ServerConfig:
    """Where to reach a daemon.  ``peer_addr`` is what other daemons dial."""

    addr: str
    peer_addr: str | None = None

    @classmethod
    def parse(cls, text: str) -> ServerConfig:
        addr, _, peer = text.strip().partition("@")
        return cls(addr, peer or None)


def servers_from_env() -> list[ServerConfig]:
    raw = os.environ.get(SERVERS_ENV, "")
    return [ServerConfig.parse(s) for s in raw.split(";") if s.strip()]


class ServerRef:
    def __init__(self, index: int, config: ServerConfig) -> None:
        self.index = index
        self.addr = config.addr
        self.peer_addr = config.peer_addr or config.addr
        self.session_id = protocol.ZERO_SESSION
        self.available = False
        self.session_lost = False
        self.lock = threading.RLock()
        self.sock: socket.socket | None = None
        self.stream: SocketStream | None = None
        self.generation = 0
        # Frames not yet acknowledged, plus the last REPLAY_RING frames sent.
        self.unacked: OrderedDict[int, bytes] = OrderedDict()
        self.recent: deque[tuple[int, bytes]] = deque(maxlen=REPLAY_RING)
        self.bytes_in = 0
        self.bytes_out = 0
        self.frames_out = 0
        self.reconnecting = False
        self.reconnects = 0

    def replay_frames(self) -> list[tuple[int, bytes]]:
        frames = dict(self.recent)
        frames.update(self.unacked)
        return sorted(frames.items())


class Event:
    """Handle for one enqueued command."""

    def __init__(self, ctx: Context, command_id: int, server: int) -> None:
        self.ctx = ctx
        self.command_id = command_id
        self.server = server

    @property
    def status(self) -> Status:
        return self.ctx.graph.status(self.command_id)

    @property
    def error(self) -> protocol.Status:
        code = self.ctx._codes.get(self.command_id)
        if code is not None:
            return code
        # Failed locally before the server answered: an upstream event failed.
        return protocol.Status.DEPENDENCY_FAILED if self.status == Status.FAILED else protocol.Status.OK

    def wait(self, timeout: float | None = None) -> Status:
        return self.ctx.wait(self, timeout)

    def __repr__(self) -> str:
        return f"Event({self.command_id}, server={self.server}, {self.status.name})"


@dataclass(eq=False)
class Buffer:
    buffer_id: int
    size: int
    host: bytearray
    location: int | None = None  # None: the host copy is the latest
    created_on: set[int] = field(default_factory=set)
    content_size: Buffer | None = None
    last_write: int | None = None
    readers: list[int] = field(default_factory=list)

    def __repr__(self) -> str:
        where = "host" if self.location is None else f"server {self.location}"
        return f"Buffer({self.buffer_id}, {self.size} bytes, at {where})"


class Context:
    def __init__(
        self,
        servers: Sequence[str | ServerConfig],
        reconnect_deadline: float = RECONNECT_DEADLINE,
        connect_timeout: float = 5.0,
    ) -> None:
        if not servers:
            raise ValueError("need at least one server address")
        configs = [s if isinstance(s, ServerConfig) else ServerConfig.parse(s) for s in servers]
        self.servers = [ServerRef(i, c) for i, c in enumerate(configs)]
        self.reconnect_deadline = reconnect_deadline
        self.connect_timeout = connect_timeout
        self.graph = TaskGraph()
        self.buffers: dict[int, Buffer] = {}
        self._ids = itertools.count(1)
        self._buffer_ids = itertools.count(1)
        self._lock = threading.RLock()
        self._cond = threading.Condition()
        self._codes: dict[int, protocol.Status] = {}
        self._issued: dict[int, int] = {}
        self._migration_dest: dict[int, int] = {}
        self._results: dict[int, bytes] = {}
        self._unfinished: list[int] = []
        self._closed = False

    # -- connection management -------------------------------------------------

    def connect(self) -> Context:
        for ref in self.servers:
            try:
                self._open(ref)
            except (OSError, protocol.ProtocolError) as e:
                log.warning("server %d (%s) unreachable: %s", ref.index, ref.addr, e)
        if not any(ref.available for ref in self.servers):
            self._closed = True
            raise AllServersUnreachable(", ".join(ref.addr for ref in self.servers))
        for ref in self.servers:
            if not ref.available:
                self._start_reconnect(ref)
        events = []
        for ref in self.servers:
            if ref.available:
                events += self._send_mesh_setup(ref)
        for ev in events:
            ev.wait(self.connect_timeout)
        return self

    def _open(self, ref: ServerRef) -> HandshakeStatus:
        sock = dial(ref.addr, timeout=self.connect_timeout)
        stream = SocketStream(sock)
        try:
            sock.settimeout(self.connect_timeout)
            stream.write(protocol.encode_handshake(protocol.Handshake(Role.CLIENT, ref.session_id)))
            reply = protocol.read_handshake_reply(stream)
            sock.settimeout(None)
        except Exception:
            close_socket(sock)
            raise
        if ref.session_id != protocol.ZERO_SESSION and reply.status != HandshakeStatus.RESUMED:
            close_socket(sock)
            return reply.status
        with ref.lock:
            ref.session_id = reply.session_id
            ref.sock = sock
            ref.stream = stream
            ref.generation += 1
            ref.bytes_in += stream.counters.bytes_in
            ref.bytes_out += stream.counters.bytes_out
            stream.counters.bytes_in = stream.counters.bytes_out = 0
            if reply.status in (HandshakeStatus.RESUMED, HandshakeStatus.NEW):
                for _, frame in ref.replay_frames():
                    self._write(ref, frame)
            ref.available = True
            gen = ref.generation
        threading.Thread(target=self._read_loop, args=(ref, gen, stream), name=f"client-{ref.index}-reader",
                         daemon=True).start()
        return reply.status

    def _send_mesh_setup(self, ref: ServerRef) -> list[Event]:
        addrs = tuple(r.peer_addr for r in self.servers)
        events = [self._submit(ref, lambda cid: PeerList(cid, addrs))]
        for other in self.servers:
            if other.session_id != protocol.ZERO_SESSION:
                sid = other.session_id
                events.append(self._submit(ref, lambda cid, i=other.index: SetPeerSession(cid, i, sid)))
        return events

    def _write(self, ref: ServerRef, frame: bytes) -> None:
        ref.sock.sendall(frame)
        ref.bytes_out += len(frame)
        ref.frames_out += 1

    def _read_loop(self, ref: ServerRef, gen: int, stream: SocketStream) -> None:
        try:
            while True:
                msg = protocol.decode_frame(stream)
                ref.bytes_in += stream.counters.bytes_in
                stream.counters.bytes_in = 0
                self._on_reply(msg)
        except protocol.ProtocolError as e:
            if not isinstance(e, protocol.Truncated):
                log.warning("server %d: %s", ref.index, e)
        except Exception:
            log.exception("server %d: reader failed", ref.index)
        ref.bytes_in += stream.counters.bytes_in
        stream.counters.bytes_in = 0
        self._connection_lost(ref, gen)

    def _connection_lost(self, ref: ServerRef, gen: int) -> None:
        with ref.lock:
            if gen != ref.generation or not ref.available:
                return
            ref.available = False
            close_socket(ref.sock)
            if self._closed or ref.reconnecting:
                return
        log.info("lost connection to server %d (%s), reconnecting", ref.index, ref.addr)
        self._start_reconnect(ref)

    def _start_reconnect(self, ref: ServerRef) -> None:
        with ref.lock:
            if ref.reconnecting:
                return
            ref.reconnecting = True
        threading.Thread(target=self._reconnect_loop, args=(ref,), name=f"client-{ref.index}-reconnect",
                         daemon=True).start()

    def _reconnect_loop(self, ref: ServerRef) -> None:
        deadline = time.monotonic() + self.reconnect_deadline
        delay = BACKOFF_START
        expired = False
        try:
            while not self._closed:
                try:
                    status = self._open(ref)
                except (OSError, protocol.ProtocolError) as e:
                    log.debug("server %d redial failed: %s", ref.index, e)
                else:
                    if status == HandshakeStatus.RESUMED:
                        ref.reconnects += 1
                        log.info("server %d session resumed", ref.index)
                        self._send_mesh_setup(ref)
                        return
                    if status == HandshakeStatus.NEW:
                        # First contact with a server that was down at connect time.
                        log.info("server %d joined", ref.index)
                        self._send_mesh_setup(ref)
                        sid = ref.session_id
                        for other in self.servers:
                            if other is not ref and other.available:
                                with contextlib.suppress(DeviceUnavailable):
                                    self._submit(other, lambda cid: SetPeerSession(cid, ref.index, sid))
                        return
                    log.warning("server %d no longer knows our session", ref.index)
                    with ref.lock:
                        ref.session_lost = True
                    self._fail_server(ref)
                    return
                if not expired and time.monotonic() >= deadline:
                    expired = True
                    self._fail_server(ref)
                time.sleep(delay)
                delay = min(delay * 2, BACKOFF_MAX)
        finally:
            ref.reconnecting = False

    def _fail_server(self, ref: ServerRef) -> None:
        """Give up on everything still in flight to ``ref``."""
        with ref.lock:
            ref.unacked.clear()
            ref.recent.clear()
        doomed = [cid for cid, s in self._issued.items() if s == ref.index]
        doomed += [cid for cid, s in self._migration_dest.items() if s == ref.index]
        with self._cond:
            for cid in doomed:
                self.graph.signal_complete(cid, Status.DEVICE_LOST)
            self._cond.notify_all()

    def close(self) -> None:
        self._closed = True
        for ref in self.servers:
            with ref.lock:
                ref.available = False
                if ref.sock is not None:
                    close_socket(ref.sock)

    def __enter__(self) -> Context:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- command submission ----------------------------------------------------

    def _check(self, indices: Iterable[int]) -> None:
        for i in indices:
            ref = self.servers[i]
            if ref.session_lost:
                raise SessionLost(f"server {i} ({ref.addr}) lost our session")
            if not ref.available:
                raise DeviceUnavailable(f"server {i} ({ref.addr}) is unavailable")

    def _submit(self, ref: ServerRef, make: callable, wait_ids: Sequence[int] = ()) -> Event:
        with ref.lock:
            # A link that drops mid-call keeps accepting frames into the replay
            # set, so a call that passed _check is never half sent.
            if not ref.available and not ref.reconnecting:
                raise DeviceUnavailable(f"server {ref.index} ({ref.addr}) is unavailable")
            cid = next(self._ids)
            msg = make(cid)
            frame = protocol.encode_frame(msg)
            with self._cond:
                self.graph.add_command(cid, wait_ids, Kind.REMOTE_PROXY)
                self._issued[cid] = ref.index
                self._unfinished.append(cid)
            ref.unacked[cid] = frame
            ref.recent.append((cid, frame))
            gen = ref.generation
            if not ref.available:
                return Event(self, cid, ref.index)
            try:
                self._write(ref, frame)
            except OSError:
                # Stays in the replay set; re-sent once the session is resumed.
                self._connection_lost(ref, gen)
        return Event(self, cid, ref.index)

    def _on_reply(self, msg: Message) -> None:
        if isinstance(msg, Ack):
            cid, code = msg.acked_command_id, msg.status
        elif isinstance(msg, ReadResult):
            cid, code = msg.command_id, protocol.Status.OK
            self._results[cid] = msg.payload
        else:
            log.warning("unexpected %s from server", type(msg).__name__)
            return
        server = self._issued.get(cid)
        if server is not None:
            ref = self.servers[server]
            with ref.lock:
                ref.unacked.pop(cid, None)
        with self._cond:
            if cid not in self.graph:
                return
            self._codes.setdefault(cid, protocol.Status(code) if code in protocol.Status._value2member_map_
                                   else protocol.Status.INTERNAL)
            self.graph.signal_complete(cid, Status.COMPLETE if code == 0 else Status.FAILED)
            self._cond.notify_all()

    def wait(self, event: Event, timeout: float | None = None) -> Status:
        """Block until ``event`` is terminal (or ``timeout`` elapses); return its status."""
        end = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                st = self.graph.status(event.command_id)
                if st.terminal:
                    return st
                left = None if end is None else end - time.monotonic()
                if left is not None and left <= 0:
                    return st
                self._cond.wait(left)

    def finish(self, timeout: float | None = None) -> Status:
        """Wait for every command issued so far; return the worst terminal status.

        Only commands issued since the previous successful ``finish`` count
        towards the result.  On timeout the first still-pending status is
        returned instead.
        """
        with self._cond:
            cids = list(dict.fromkeys(self._unfinished + self.graph.pending()))
        worst = Status.COMPLETE
        for cid in cids:
            st = self.wait(Event(self, cid, self._issued.get(cid, -1)), timeout)
            if not st.terminal:
                return st
            if st != Status.COMPLETE:
                worst = max(worst, st)
        with self._cond:
            done = set(cids)
            self._unfinished = [c for c in self._unfinished if c not in done]
        return worst

    def echo(self, server: int) -> int:
        """Round trip of a bare Nop to ``server``, in nanoseconds."""
        self._check([server])
        t0 = time.perf_counter_ns()
        ev = self._submit(self.servers[server], lambda cid: Nop(cid))
        ev.wait()
        return time.perf_counter_ns() - t0

    # -- buffers -----------------------------------------------------------------

    def create_buffer(self, size: int) -> Buffer:
        if size <= 0:
            raise ValueError("buffer size must be positive")
        buf = Buffer(next(self._buffer_ids), size, bytearray(size))
        self.buffers[buf.buffer_id] = buf
        return buf

    def _known(self, buf: Buffer) -> Buffer:
        if self.buffers.get(buf.buffer_id) is not buf:
            raise UnknownBuffer(f"buffer {buf.buffer_id} does not belong to this context")
        return buf

    def _pending(self, cids: Iterable[int | None]) -> list[int]:
        out = []
        for cid in cids:
            if cid is not None and not self.graph.status(cid).terminal:
                out.append(cid)
        return out

    def _recover(self, buf: Buffer) -> None:
        """Point ``buf`` back at the source if its latest migration failed.

        A failed push leaves the source copy valid, so later work reads from
        there instead of the destination's stale bytes.
        """
        cid = buf.last_write
        if cid in self._migration_dest and buf.location == self._migration_dest[cid]:
            st = self.graph.status(cid)
            if st.terminal and st != Status.COMPLETE:
                buf.location = self._issued[cid]
                if buf.content_size is not None:
                    self._recover(buf.content_size)

    def _ensure_created(self, buf: Buffer, server: int) -> None:
        if server in buf.created_on:
            return
        ref = self.servers[server]
        self._submit(ref, lambda cid: CreateBuffer(cid, buf.buffer_id, buf.size))
        buf.created_on.add(server)
        if buf.content_size is not None:
            self._ensure_created(buf.content_size, server)
            size_id = buf.content_size.buffer_id
            self._submit(ref, lambda cid: SetContentSizeBuffer(cid, buf.buffer_id, size_id))

    def _involved(self, buf: Buffer, server: int, access: Access, overwrites: bool) -> set[int]:
        """Servers a call will talk to when it needs ``buf`` on ``server``."""
        self._recover(buf)
        out = {server}
        if buf.location is None or buf.location == server or (overwrites and access == Access.WRITE):
            return out
        out.add(buf.location)
        if buf.content_size is not None:
            out |= self._involved(buf.content_size, buf.location, Access.READ, False)
        return out

    def _bring(self, buf: Buffer, server: int, access: Access, overwrites: bool = False,
               extra: Sequence[int] = ()) -> list[int]:
        """Make ``server`` hold the latest copy of ``buf``; return command ids to wait on.

        ``extra`` are explicit waits for a transfer this call issues.
        """
        self._ensure_created(buf, server)
        deps = self._pending([buf.last_write])
        if access.writes:
            deps += self._pending(buf.readers)
        if buf.location == server:
            return deps
        if access == Access.WRITE and overwrites:
            buf.location = server
            return deps
        ref = self.servers[server]
        if buf.location is None:
            for cid in self._pending(extra):
                self.wait(Event(self, cid, self._issued.get(cid, -1)))
            data = bytes(buf.host)
            ev = self._submit(ref, lambda cid: WriteBuffer(cid, buf.buffer_id, 0, data))
        else:
            src = buf.location
            waits = self._pending([buf.last_write] + buf.readers)
            if buf.content_size is not None:
                waits += self._bring(buf.content_size, src, Access.READ)
            waits = list(dict.fromkeys(self._foreign(waits, src) + list(extra)))
            ev = self._submit(self.servers[src], lambda cid: MigrateBuffer(cid, buf.buffer_id, server, tuple(waits)),
                              waits)
            self._migration_dest[ev.command_id] = server
            if buf.content_size is not None:
                buf.content_size.readers.append(ev.command_id)
        buf.location = server
        buf.last_write = ev.command_id
        buf.readers = []
        return deps + [ev.command_id]

    def _foreign(self, cids: Iterable[int], server: int) -> list[int]:
        """The subset of ``cids`` that ``server`` cannot order by itself.

        A daemon orders commands on the same buffer within its own session,
        so only work issued elsewhere (or migrations into it) needs an
        explicit wait id.  Implicit same-server order then never turns an
        earlier failure into a dependency failure.
        """
        return [c for c in dict.fromkeys(cids) if self._issued.get(c) != server or c in self._migration_dest]

    def _touch(self, buf: Buffer, cid: int, writes: bool) -> None:
        if writes:
            buf.last_write = cid
            buf.readers = []
        else:
            buf.readers.append(cid)

    def _settle(self, buf: Buffer, server: int) -> None:
        """Wait for in-flight work on ``buf`` issued to servers other than ``server``.

        Commands without a wait list (reads, writes) rely on this so they never
        race a push arriving from another daemon.
        """
        for cid in self._pending([buf.last_write] + buf.readers):
            if self._issued.get(cid) != server or cid in self._migration_dest:
                self.wait(Event(self, cid, self._issued.get(cid, -1)))

    def write_buffer(self, buf: Buffer, data: bytes, offset: int = 0, server: int | None = None) -> Event | None:
        """Write ``data`` at ``offset``.

        With ``server=None`` the host copy is updated (fetching the latest
        contents first if a server holds them) and no event is returned.
        """
        self._known(buf)
        data = bytes(data)
        if offset < 0 or offset + len(data) > buf.size:
            raise ValueError(f"write of {len(data)} bytes at {offset} exceeds buffer of {buf.size}")
        with self._lock:
            if server is None:
                self._recover(buf)
                if buf.location is not None:
                    buf.host[:] = self.read_buffer(buf)
                    buf.location = None
                buf.host[offset:offset + len(data)] = data
                return None
            full = offset == 0 and len(data) == buf.size
            access = Access.WRITE if full else Access.READWRITE
            self._check(self._involved(buf, server, access, full))
            self._bring(buf, server, access, full)
            self._settle(buf, server)
            ev = self._submit(self.servers[server], lambda cid: WriteBuffer(cid, buf.buffer_id, offset, data))
            buf.location = server
            self._touch(buf, ev.command_id, True)
            return ev

    def read_buffer(self, buf: Buffer, offset: int = 0, size: int | None = None) -> bytes:
        """Return ``size`` bytes at ``offset`` from the latest copy (blocking)."""
        self._known(buf)
        size = buf.size - offset if size is None else size
        if offset < 0 or size < 0 or offset + size > buf.size:
            raise ValueError(f"read of {size} bytes at {offset} exceeds buffer of {buf.size}")
        with self._lock:
            self._recover(buf)
            if buf.location is None:
                return bytes(buf.host[offset:offset + size])
            server = buf.location
            self._check([server])
            self._settle(buf, server)
            ev = self._submit(self.servers[server], lambda cid: ReadBuffer(cid, buf.buffer_id, offset, size))
        if ev.wait() != Status.COMPLETE:
            raise CommandFailed(ev)
        return self._results.pop(ev.command_id)

    def set_content_size(self, buf: Buffer, size_buf: Buffer) -> None:
        """Only the first ``u64(size_buf)`` bytes of ``buf`` travel on migration."""
        self._known(buf)
        self._known(size_buf)
        if size_buf.size < 8:
            raise ValueError("content size buffer must hold at least 8 bytes")
        with self._lock:
            self._check(buf.created_on)
            buf.content_size = size_buf
            for server in sorted(buf.created_on):
                ref = self.servers[server]
                self._ensure_created(size_buf, server)
                self._submit(ref, lambda cid: SetContentSizeBuffer(cid, buf.buffer_id, size_buf.buffer_id))

    def release(self, buf: Buffer) -> None:
        with self._lock:
            self._known(buf)
            for server in sorted(buf.created_on):
                if self.servers[server].available:
                    self._submit(self.servers[server], lambda cid: FreeBuffer(cid, buf.buffer_id))
            del self.buffers[buf.buffer_id]

    # -- kernels and migrations ------------------------------------------------

    def enqueue_kernel(
        self,
        server: int,
        kernel_name: str,
        args: Sequence[Buffer | int | float] = (),
        wait_list: Sequence[Event] = (),
    ) -> Event:
        """Run a built-in kernel on ``server`` once ``wait_list`` has completed.

        Integer scalars travel as u64, floats as f64.  Unknown kernel names are
        sent as-is; the daemon fails the returned event.
        """
        try:
            spec = kernels.lookup(kernel_name)
            schema = list(spec.arg_schema)
        except kernels.KernelNotFound:
            spec = None
            schema = []
        with self._lock:
            descs = []
            uses: dict[int, tuple[Buffer, Access, bool]] = {}
            for i, a in enumerate(args):
                if isinstance(a, Buffer):
                    self._known(a)
                    descs.append(ArgDesc.buffer(a.buffer_id))
                    arg = schema[i] if i < len(schema) and schema[i].kind == ArgKind.BUFFER else None
                    access = arg.access if arg else Access.READWRITE
                    overwrites = bool(arg and arg.overwrites)
                    prev = uses.get(a.buffer_id)
                    if prev is not None:
                        merged = access if prev[1] == access else Access.READWRITE
                        uses[a.buffer_id] = (a, merged, prev[2] and overwrites)
                    else:
                        uses[a.buffer_id] = (a, access, overwrites)
                elif isinstance(a, float):
                    descs.append(ArgDesc.f64(a))
                elif isinstance(a, int):
                    descs.append(ArgDesc.u64(a))
                else:
                    raise TypeError(f"unsupported kernel argument {a!r}")
            involved = {server}
            for buf, access, overwrites in uses.values():
                involved |= self._involved(buf, server, access, overwrites)
            self._check(involved)
            implicit = []
            for buf, access, overwrites in uses.values():
                implicit += self._bring(buf, server, access, overwrites)
            waits = list(dict.fromkeys([e.command_id for e in wait_list] + self._foreign(implicit, server)))
            ev = self._submit(self.servers[server],
                              lambda cid: RunKernel(cid, kernel_name, tuple(descs), tuple(waits)), waits)
            for buf, access, _ in uses.values():
                self._touch(buf, ev.command_id, access.writes)
            return ev

    def enqueue_migration(self, buf: Buffer, server: int, wait_list: Sequence[Event] = ()) -> Event | None:
        """Move the latest copy of ``buf`` to ``server``.

        Returns the transfer's event, or ``None`` if ``server`` already holds it.
        """
        self._known(buf)
        with self._lock:
            self._recover(buf)
            if buf.location == server:
                return None
            self._check(self._involved(buf, server, Access.READWRITE, False))
            self._bring(buf, server, Access.READWRITE, extra=[e.command_id for e in wait_list])
            return Event(self, buf.last_write, self._issued[buf.last_write])

    # -- introspection -----------------------------------------------------------

    def link_bytes(self) -> dict[int, tuple[int, int]]:
        """``{server: (bytes_in, bytes_out)}`` on each client link."""
        return {ref.index: (ref.bytes_in, ref.bytes_out) for ref in self.servers}

    def client_bytes(self) -> tuple[int, int]:
        return (sum(r.bytes_in for r in self.servers), sum(r.bytes_out for r in self.servers))

    def available(self, server: int) -> bool:
        return self.servers[server].available


def connect(servers: Sequence[str | ServerConfig] | None = None, **kw) -> Context:
    """Open a context on ``servers`` (default: ``$OFFLOAD_SERVERS``)."""
    if servers is None:
        servers = servers_from_env()
    return Context(servers, **kw).connect()
