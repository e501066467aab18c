"""Compute daemon: sessions, command scheduling and built-in kernel execution."""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from . import kernels, protocol
from .event_graph import CycleDetected, DuplicateCommand, Kind, Status as EvStatus, TaskGraph
from .peer_mesh import LinkDown, LinkState, PeerMesh
from .protocol import (
    Ack,
    ArgKind,
    CreateBuffer,
    EventComplete,
    FreeBuffer,
    HandshakeReply,
    HandshakeStatus,
    Message,
    MigrateBuffer,
    Nop,
    PeerList,
    PushBuffer,
    ReadBuffer,
    ReadResult,
    Role,
    RunKernel,
    SetContentSizeBuffer,
    SetPeerSession,
    Status,
    WriteBuffer,
)
from .transport import Connection, SocketStream, close_socket, format_addr, parse_addr, tune

log = logging.getLogger(__name__)

RESULT_CACHE = 128
HANDSHAKE_TIMEOUT = 5.0


class CommandError(Exception):
    def __init__(self, status: Status, message: str = "") -> None:
        super().__init__(message or status.name)
        self.status = status


@dataclass
class BufferRecord:
    buffer_id: int
    capacity: int
    data: bytearray
    valid_here: bool = False
    # Created by an incoming push before the client's CreateBuffer arrived.
    provisional: bool = False


@dataclass
class _Hazard:
    last_writer: int | None = None
    readers: list[int] = field(default_factory=list)


class Session:
    """Server-side state of one client context."""

    def __init__(self, daemon: Daemon, session_id: bytes) -> None:
        self.daemon = daemon
        self.session_id = session_id
        self.lock = threading.RLock()
        self.buffers: dict[int, BufferRecord] = {}
        self.graph = TaskGraph()
        self.pending: dict[int, Message] = {}
        self.watermark = 0
        self.result_cache: OrderedDict[int, Message] = OrderedDict()
        self.content_links: dict[int, int] = {}
        self.client: Connection | None = None
        self.mesh = PeerMesh(session_id, self._push_failed, daemon.sndbuf)
        self.executed = 0
        self._hazards: dict[int, _Hazard] = {}
        self._migrating: dict[int, int] = {}
        self._reply_ids = itertools.count(1)

    # -- client connection ---------------------------------------------------

    def attach_client(self, conn: Connection, resumed: bool) -> None:
        with self.lock:
            old, self.client = self.client, conn
            if resumed:
                # Replies may have died with the previous connection.
                for reply in self.result_cache.values():
                    conn.send(reply)
        if old is not None and old is not conn:
            old.close()

    def detach_client(self, conn: Connection) -> None:
        with self.lock:
            if self.client is conn:
                self.client = None

    def _reply(self, command_id: int, reply: Message) -> None:
        self.result_cache[command_id] = reply
        self.result_cache.move_to_end(command_id)
        while len(self.result_cache) > RESULT_CACHE:
            self.result_cache.popitem(last=False)
        if self.client is not None:
            self.client.send(reply)

    # -- dispatch ------------------------------------------------------------

    def dispatch(self, msg: Message) -> None:
        """Handle one message read from the client connection."""
        with self.lock:
            cid = msg.command_id
            if cid <= self.watermark:
                cached = self.result_cache.get(cid)
                if cached is not None and self.client is not None:
                    self.client.send(cached)
                return
            self.watermark = cid
            if isinstance(msg, Nop):
                self._complete(cid, Status.OK)
                return
            if isinstance(msg, PeerList):
                self.mesh.set_addrs(msg.addrs)
                self._complete(cid, Status.OK)
                return
            if isinstance(msg, SetPeerSession):
                self.mesh.set_session(msg.peer_index, msg.session_id)
                self._complete(cid, Status.OK)
                return
            if isinstance(msg, (ReadResult, PushBuffer, EventComplete, Ack)):
                log.warning("client sent %s, ignoring", type(msg).__name__)
                self._complete(cid, Status.INTERNAL)
                return
            deps = set(getattr(msg, "wait_ids", ()))
            # Implicit per-buffer ordering: waits for earlier accesses but does
            # not inherit their failures.
            order = self._hazard_deps(msg)
            try:
                ev = self.graph.add_command(cid, deps, Kind.LOCAL, order)
            except CycleDetected:
                self._complete(cid, Status.CYCLE_DETECTED)
                return
            except DuplicateCommand:
                self._complete(cid, Status.DUPLICATE_COMMAND)
                return
            self.pending[cid] = msg
            if ev.status == EvStatus.READY:
                self.daemon.work.put(self)
            self._drain_failed()

    def _hazard_deps(self, msg: Message) -> set[int]:
        reads: list[int] = []
        writes: list[int] = []
        if isinstance(msg, (CreateBuffer, FreeBuffer, WriteBuffer)):
            writes.append(msg.buffer_id)
        elif isinstance(msg, ReadBuffer):
            reads.append(msg.buffer_id)
        elif isinstance(msg, MigrateBuffer):
            # Ownership leaves this daemon: order after every earlier access.
            writes.append(msg.buffer_id)
            if msg.buffer_id in self.content_links:
                reads.append(self.content_links[msg.buffer_id])
        elif isinstance(msg, SetContentSizeBuffer):
            reads += [msg.buffer_id, msg.size_buffer_id]
        elif isinstance(msg, RunKernel):
            spec = kernels.REGISTRY.get(msg.kernel_name)
            if spec is not None:
                for desc, arg in zip(msg.args, spec.arg_schema):
                    if desc.kind == ArgKind.BUFFER and arg.kind == ArgKind.BUFFER:
                        (writes if arg.access.writes else reads).append(desc.value)
        deps: set[int] = set()
        cid = msg.command_id
        for b in dict.fromkeys(reads):
            h = self._hazards.setdefault(b, _Hazard())
            if h.last_writer is not None:
                deps.add(h.last_writer)
        for b in dict.fromkeys(writes):
            h = self._hazards.setdefault(b, _Hazard())
            if h.last_writer is not None:
                deps.add(h.last_writer)
            deps.update(h.readers)
        for b in dict.fromkeys(reads):
            if b not in writes:
                self._hazards[b].readers.append(cid)
        for b in dict.fromkeys(writes):
            self._hazards[b] = _Hazard(last_writer=cid)
        deps.discard(cid)
        return deps

    def _complete(self, cid: int, status: Status, reply: Message | None = None) -> None:
        # Caller holds the lock.
        ready = self.graph.signal_complete(cid, EvStatus.COMPLETE if status == Status.OK else EvStatus.FAILED)
        self.executed += 1
        self._reply(cid, reply if reply is not None else Ack(next(self._reply_ids), cid, int(status)))
        self.mesh.broadcast_completion(cid, int(status))
        for _ in ready:
            self.daemon.work.put(self)
        self._drain_failed()

    def _drain_failed(self) -> None:
        for cid in self.graph.take_failed():
            if self.pending.pop(cid, None) is not None:
                self._reply(cid, Ack(next(self._reply_ids), cid, int(Status.DEPENDENCY_FAILED)))
                self.mesh.broadcast_completion(cid, int(Status.DEPENDENCY_FAILED))

    # -- execution -----------------------------------------------------------

    def run_one(self) -> None:
        """Pop one ready command and execute it (executor worker entry point)."""
        with self.lock:
            cid = self.graph.pop_ready()
            if cid is None:
                return
            msg = self.pending.pop(cid)
            job = None
            try:
                job = self._start(msg)
            except CommandError as e:
                self._complete(cid, e.status)
                return
            if job is None:
                return
        spec, values, records = job
        try:
            kernels.run_kernel(spec, values)
            status = Status.OK
        except kernels.KernelError as e:
            log.info("kernel %s failed: %s", spec.name, e)
            status = e.status
        with self.lock:
            if status == Status.OK:
                for rec in records:
                    rec.valid_here = True
            self._complete(cid, status)

    def _buffer(self, buffer_id: int) -> BufferRecord:
        rec = self.buffers.get(buffer_id)
        if rec is None:
            raise CommandError(Status.UNKNOWN_BUFFER, f"unknown buffer {buffer_id}")
        return rec

    def _start(self, msg: Message):
        """Execute ``msg`` under the lock, or return a kernel job to run unlocked."""
        cid = msg.command_id
        if isinstance(msg, CreateBuffer):
            rec = self.buffers.get(msg.buffer_id)
            if rec is None:
                self.buffers[msg.buffer_id] = BufferRecord(msg.buffer_id, msg.size, bytearray(msg.size))
            elif rec.capacity < msg.size or rec.provisional:
                rec.data.extend(bytes(max(0, msg.size - len(rec.data))))
                rec.capacity = len(rec.data)
                rec.provisional = False
            self._complete(cid, Status.OK)
        elif isinstance(msg, FreeBuffer):
            self._buffer(msg.buffer_id)
            del self.buffers[msg.buffer_id]
            self.content_links.pop(msg.buffer_id, None)
            self._complete(cid, Status.OK)
        elif isinstance(msg, WriteBuffer):
            rec = self._buffer(msg.buffer_id)
            end = msg.offset + len(msg.payload)
            if end > rec.capacity:
                raise CommandError(Status.OUT_OF_RANGE, "write past end of buffer")
            rec.data[msg.offset:end] = msg.payload
            rec.valid_here = True
            self._complete(cid, Status.OK)
        elif isinstance(msg, ReadBuffer):
            rec = self._buffer(msg.buffer_id)
            end = msg.offset + msg.len
            if end > rec.capacity:
                raise CommandError(Status.OUT_OF_RANGE, "read past end of buffer")
            self._complete(cid, Status.OK, ReadResult(cid, msg.buffer_id, bytes(rec.data[msg.offset:end])))
        elif isinstance(msg, SetContentSizeBuffer):
            self._buffer(msg.buffer_id)
            size_rec = self._buffer(msg.size_buffer_id)
            if size_rec.capacity < 8:
                raise CommandError(Status.SIZE_BUFFER_TOO_SMALL)
            self.content_links[msg.buffer_id] = msg.size_buffer_id
            self._complete(cid, Status.OK)
        elif isinstance(msg, MigrateBuffer):
            self._migrate(msg)
        elif isinstance(msg, RunKernel):
            return self._prepare_kernel(msg)
        else:
            raise CommandError(Status.INTERNAL, f"cannot execute {type(msg).__name__}")
        return None

    def _prepare_kernel(self, msg: RunKernel):
        try:
            spec = kernels.lookup(msg.kernel_name)
        except kernels.KernelNotFound:
            raise CommandError(Status.UNKNOWN_KERNEL) from None
        if len(msg.args) != len(spec.arg_schema):
            raise CommandError(Status.ARG_MISMATCH)
        values: list = []
        records = []
        for desc, arg in zip(msg.args, spec.arg_schema):
            if desc.kind != arg.kind:
                raise CommandError(Status.ARG_MISMATCH)
            if arg.kind == ArgKind.BUFFER:
                rec = self._buffer(desc.value)
                records.append(rec)
                values.append(rec.data)
            else:
                values.append(desc.value)
        return spec, values, records

    def content_size(self, rec: BufferRecord) -> int:
        """Bytes of ``rec`` worth sending: the linked content size, clamped to capacity."""
        size_id = self.content_links.get(rec.buffer_id)
        size_rec = self.buffers.get(size_id) if size_id is not None else None
        if size_rec is None:
            return rec.capacity
        return min(int.from_bytes(size_rec.data[:8], "little"), rec.capacity)

    def _migrate(self, msg: MigrateBuffer) -> None:
        cid = msg.command_id
        rec = self._buffer(msg.buffer_id)
        if msg.dest_server == self.mesh.own_index:
            self._complete(cid, Status.OK)
            return
        if not rec.valid_here:
            raise CommandError(Status.STALE_SOURCE, f"buffer {rec.buffer_id} is not valid here")
        n = self.content_size(rec)
        try:
            link = self.mesh.link(msg.dest_server)
            rec.valid_here = False
            self._migrating[cid] = rec.buffer_id
            link.send_push(PushBuffer(0, rec.buffer_id, n, cid, bytes(rec.data[:n])))
        except LinkDown as e:
            log.info("migration %d: %s", cid, e)
            rec.valid_here = True
            self._migrating.pop(cid, None)
            raise CommandError(Status.PEER_UNREACHABLE) from None
        # Completed when the destination broadcasts its EventComplete.

    def _push_failed(self, push: PushBuffer) -> None:
        with self.lock:
            cid = push.origin_command_id
            buffer_id = self._migrating.pop(cid, None)
            if buffer_id is None or self.graph.status(cid) != EvStatus.RUNNING:
                return
            rec = self.buffers.get(buffer_id)
            if rec is not None:
                rec.valid_here = True
            self._complete(cid, Status.PEER_UNREACHABLE)

    # -- peer traffic ----------------------------------------------------------

    def on_peer_message(self, msg: Message) -> None:
        with self.lock:
            if isinstance(msg, PushBuffer):
                self._receive_push(msg)
            elif isinstance(msg, EventComplete):
                cid = msg.completed_command_id
                if self._migrating.pop(cid, None) is not None:
                    self.mesh.confirm(cid)
                st = EvStatus.COMPLETE if msg.status == Status.OK else EvStatus.FAILED
                for _ in self.graph.signal_complete(cid, st):
                    self.daemon.work.put(self)
                self._drain_failed()
            else:
                log.warning("unexpected %s on peer link", type(msg).__name__)

    def _receive_push(self, push: PushBuffer) -> None:
        origin = push.origin_command_id
        st = self.graph.status(origin)
        if st is not None and st.terminal:
            return
        rec = self.buffers.get(push.buffer_id)
        n = len(push.payload)
        if rec is None:
            rec = BufferRecord(push.buffer_id, n, bytearray(push.payload), provisional=True)
            self.buffers[push.buffer_id] = rec
        else:
            if n > rec.capacity:
                log.warning("push of %d bytes into buffer %d of capacity %d truncated", n, rec.buffer_id, rec.capacity)
                n = rec.capacity
            rec.data[:n] = push.payload[:n]
        rec.valid_here = True
        self.daemon.pushes_received += 1
        self._complete(origin, Status.OK)

    def link_states(self) -> dict[int, LinkState]:
        return self.mesh.states()

    def close(self) -> None:
        self.mesh.close()
        with self.lock:
            conn = self.client
        if conn is not None:
            conn.close()


class Daemon:
    """Accepts client and peer connections and executes their commands.

    ``Daemon(...).start()`` serves in background threads; ``address`` holds the
    bound ``host:port`` (useful with port 0).
    """

    def __init__(
        self,
        listen: str = "127.0.0.1:0",
        peer_listen: str | None = None,
        executors: int = 1,
        sndbuf: int | None = None,
    ) -> None:
        self.listen = listen
        self.peer_listen = peer_listen
        self.executors = executors
        self.sndbuf = sndbuf
        self.sessions: dict[bytes, Session] = {}
        self.work: queue.Queue = queue.Queue()
        self.connections: set[Connection] = set()
        self.pushes_received = 0
        self._lock = threading.Lock()
        self._sockets: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._stopped = threading.Event()
        self.address: str | None = None
        self.peer_address: str | None = None

    def start(self) -> Daemon:
        listeners = [self.listen] + ([self.peer_listen] if self.peer_listen else [])
        bound = []
        for addr in listeners:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                sock.bind(parse_addr(addr))
            except OSError:
                sock.close()
                for s in self._sockets:
                    s.close()
                raise
            sock.listen(64)
            self._sockets.append(sock)
            bound.append(format_addr(sock.getsockname()))
        self.address = bound[0]
        self.peer_address = bound[1] if len(bound) > 1 else bound[0]
        for sock in self._sockets:
            self._spawn(self._accept_loop, sock, name="accept")
        for i in range(self.executors):
            self._spawn(self._executor_loop, name=f"executor-{i}")
        log.info("daemon listening on %s (peers on %s)", self.address, self.peer_address)
        return self

    def _spawn(self, target, *args, name: str) -> None:
        t = threading.Thread(target=target, args=args, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def serve_forever(self) -> None:
        if self.address is None:
            self.start()
        self._stopped.wait()

    def shutdown(self) -> None:
        self._stopped.set()
        for sock in self._sockets:
            close_socket(sock)
        for _ in range(self.executors):
            self.work.put(None)
        with self._lock:
            sessions = list(self.sessions.values())
            conns = list(self.connections)
        for s in sessions:
            s.close()
        for c in conns:
            c.close()

    def __enter__(self) -> Daemon:
        return self.start() if self.address is None else self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def _executor_loop(self) -> None:
        while True:
            session = self.work.get()
            if session is None:
                return
            try:
                session.run_one()
            except Exception:
                log.exception("executor failed")

    def _accept_loop(self, listener: socket.socket) -> None:
        while not self._stopped.is_set():
            try:
                sock, peer = listener.accept()
            except OSError:
                return
            tune(sock, self.sndbuf)
            threading.Thread(target=self._handshake, args=(sock, peer), name="handshake", daemon=True).start()

    def _handshake(self, sock: socket.socket, peer: tuple) -> None:
        stream = SocketStream(sock)
        try:
            sock.settimeout(HANDSHAKE_TIMEOUT)
            hs = protocol.read_handshake(stream)
            sock.settimeout(None)
        except (OSError, protocol.ProtocolError) as e:
            log.info("handshake from %s failed: %s", peer, e)
            close_socket(sock)
            return
        with self._lock:
            session = self.sessions.get(hs.session_id)
            if hs.role == Role.PEER:
                status = HandshakeStatus.RESUMED if session else HandshakeStatus.UNKNOWN_SESSION
                sid = hs.session_id
            elif hs.session_id == protocol.ZERO_SESSION or session is None:
                status = HandshakeStatus.NEW if hs.session_id == protocol.ZERO_SESSION else HandshakeStatus.UNKNOWN_SESSION
                sid = protocol.new_session_id()
                session = self.sessions[sid] = Session(self, sid)
            else:
                status = HandshakeStatus.RESUMED
                sid = hs.session_id
        try:
            stream.write(protocol.encode_handshake_reply(HandshakeReply(hs.role, sid, status)))
        except OSError:
            close_socket(sock)
            return
        if session is None:
            close_socket(sock)
            return
        log.debug("%s %s session %s from %s", hs.role.name.lower(), status.name, sid.hex(), peer)
        if hs.role == Role.PEER:
            conn = Connection(sock, f"peer-in-{peer[1]}", lambda c, m: session.on_peer_message(m), self._forget)
        else:
            conn = Connection(sock, f"client-{peer[1]}", lambda c, m: session.dispatch(m), self._client_closed(session))
        conn.counters.bytes_in += stream.counters.bytes_in
        conn.counters.bytes_out += stream.counters.bytes_out
        conn.role = hs.role
        conn.session = session
        with self._lock:
            self.connections.add(conn)
        if hs.role == Role.CLIENT:
            session.attach_client(conn, resumed=status == HandshakeStatus.RESUMED)
        conn.start()

    def _client_closed(self, session: Session):
        def closed(conn: Connection, leftovers: list) -> None:
            session.detach_client(conn)
            self._forget(conn, leftovers)
        return closed

    def _forget(self, conn: Connection, leftovers: list) -> None:
        with self._lock:
            self.connections.discard(conn)

    def stats(self) -> dict:
        """Traffic counters for tests and benchmark reports."""
        with self._lock:
            sessions = list(self.sessions.values())
        links = [link for s in sessions for link in s.mesh.links.values()]
        return {
            "sessions": len(sessions),
            "pushes_sent": sum(link.pushes_sent for link in links),
            "push_payload_lens": [n for link in links for n in link.push_payload_lens],
            "completions_sent": sum(link.completions_sent for link in links),
            "peer_bytes_out": sum(link.bytes_out for link in links),
            "pushes_received": self.pushes_received,
        }
