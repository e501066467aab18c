"""Daemon-to-daemon links for one client session.

Each daemon dials every other daemon named in the client's peer list and
uses that outbound link for the buffer pushes and completion notifications
it originates.  The link handshakes as ``Role.PEER`` with the *remote*
daemon's session id for the same client, so the receiver can route the
traffic to the right session.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
from collections import deque
from typing import Callable

from . import protocol
from .protocol import EventComplete, HandshakeStatus, Message, PushBuffer, Role
from .transport import Connection, SocketStream, close_socket, dial

log = logging.getLogger(__name__)

COMPLETION_REPLAY = 128
# Completions remembered per session so links created later still hear them.
COMPLETION_HISTORY = 1024
BACKOFF_START = 0.01
BACKOFF_MAX = 0.5


class LinkDown(Exception):
    pass


class LinkState(enum.Enum):
    DISCONNECTED = "disconnected"
    CONNECTING = "connecting"
    READY = "ready"


class PeerLink:
    def __init__(
        self,
        peer_index: int,
        addr: str,
        peer_session: bytes,
        on_push_failed: Callable[[PushBuffer], None],
        sndbuf: int | None = None,
    ) -> None:
        self.peer_index = peer_index
        self.addr = addr
        self.peer_session = peer_session
        self.state = LinkState.CONNECTING
        self.conn: Connection | None = None
        self._on_push_failed = on_push_failed
        self._sndbuf = sndbuf
        self._lock = threading.Lock()
        self._pending: deque[Message] = deque()
        self._unconfirmed: dict[int, PushBuffer] = {}
        self._replay: deque[EventComplete] = deque(maxlen=COMPLETION_REPLAY)
        self._seq = itertools.count(1)
        self._stopped = threading.Event()
        self._wake = threading.Event()
        self.connects = 0
        self.pushes_sent = 0
        self.push_payload_lens: list[int] = []
        self.completions_sent = 0
        self._bytes_closed = 0
        self._thread = threading.Thread(target=self._dial_loop, name=f"peer-{peer_index}-dial", daemon=True)

    def start(self) -> PeerLink:
        self._thread.start()
        return self

    @property
    def bytes_out(self) -> int:
        conn = self.conn
        return self._bytes_closed + (conn.counters.bytes_out if conn else 0)

    def _dial_loop(self) -> None:
        delay = BACKOFF_START
        while not self._stopped.is_set():
            with self._lock:
                if self.state == LinkState.READY:
                    self._wake.clear()
            if self.state == LinkState.READY:
                self._wake.wait()
                delay = BACKOFF_START
                continue
            try:
                self._connect()
            except (OSError, protocol.ProtocolError) as e:
                log.debug("peer %d (%s) dial failed: %s", self.peer_index, self.addr, e)
                self._set_disconnected()
                if self._stopped.wait(delay):
                    return
                delay = min(delay * 2, BACKOFF_MAX)
                with self._lock:
                    if self.state == LinkState.DISCONNECTED:
                        self.state = LinkState.CONNECTING

    def _connect(self) -> None:
        sock = dial(self.addr, sndbuf=self._sndbuf)
        try:
            stream = SocketStream(sock)
            stream.write(protocol.encode_handshake(protocol.Handshake(Role.PEER, self.peer_session)))
            reply = protocol.read_handshake_reply(stream)
        except Exception:
            close_socket(sock)
            raise
        if reply.status != HandshakeStatus.RESUMED:
            close_socket(sock)
            raise protocol.ProtocolError(f"peer refused session binding ({reply.status.name})")
        conn = Connection(sock, f"peer-{self.peer_index}", lambda c, m: None, self._closed)
        conn.counters.bytes_in += stream.counters.bytes_in
        conn.counters.bytes_out += stream.counters.bytes_out
        with self._lock:
            if self._stopped.is_set():
                close_socket(sock)
                return
            self.conn = conn
            self.connects += 1
            conn.start()
            if self.connects > 1:
                for ec in self._replay:
                    self._emit(ec)
            while self._pending:
                self._emit(self._pending.popleft())
            self.state = LinkState.READY

    def _emit(self, msg: Message) -> None:
        # Caller holds the lock and the connection is up.
        if isinstance(msg, PushBuffer):
            self.pushes_sent += 1
            self.push_payload_lens.append(len(msg.payload))
            self._unconfirmed[msg.origin_command_id] = msg
        else:
            self.completions_sent += 1
        self.conn.send(msg)

    def _closed(self, conn: Connection, leftovers: list) -> None:
        with self._lock:
            if conn is not self.conn:
                return
            self._bytes_closed += conn.counters.bytes_out
            self.conn = None
        self._set_disconnected()
        self._wake.set()

    def _set_disconnected(self) -> None:
        with self._lock:
            self.state = LinkState.DISCONNECTED
            failed = list(self._unconfirmed.values())
            failed += [m for m in self._pending if isinstance(m, PushBuffer)]
            self._unconfirmed.clear()
            self._pending = deque(m for m in self._pending if not isinstance(m, PushBuffer))
        for push in failed:
            self._on_push_failed(push)

    def send_push(self, push: PushBuffer) -> None:
        """Queue a buffer push; raises :class:`LinkDown` if the peer is unreachable."""
        push = PushBuffer(next(self._seq), push.buffer_id, push.content_len, push.origin_command_id, push.payload)
        with self._lock:
            if self.state == LinkState.DISCONNECTED or self._stopped.is_set():
                raise LinkDown(f"peer {self.peer_index} ({self.addr}) is unreachable")
            if self.state == LinkState.READY:
                self._emit(push)
            else:
                self._pending.append(push)

    def seed(self, completions) -> None:
        """Queue completions that happened before this link existed."""
        with self._lock:
            for command_id, status in completions:
                ec = EventComplete(next(self._seq), command_id, status)
                self._replay.append(ec)
                self._pending.append(ec)

    def send_completion(self, command_id: int, status: int) -> None:
        ec = EventComplete(next(self._seq), command_id, status)
        with self._lock:
            self._replay.append(ec)
            if self.state == LinkState.READY:
                self._emit(ec)
            elif self.state == LinkState.CONNECTING:
                self._pending.append(ec)
            # Disconnected: dropped here, replayed from the ring on reconnect.

    def confirm(self, origin_command_id: int) -> None:
        with self._lock:
            self._unconfirmed.pop(origin_command_id, None)

    def close(self) -> None:
        self._stopped.set()
        self._wake.set()
        with self._lock:
            conn = self.conn
        if conn is not None:
            conn.close()


class PeerMesh:
    """All outbound peer links of one session, keyed by server index."""

    def __init__(self, own_session: bytes, on_push_failed: Callable[[PushBuffer], None],
                 sndbuf: int | None = None) -> None:
        self.own_session = own_session
        self.own_index: int | None = None
        self.addrs: tuple[str, ...] = ()
        self.sessions: dict[int, bytes] = {}
        self.links: dict[int, PeerLink] = {}
        self._on_push_failed = on_push_failed
        self._sndbuf = sndbuf
        self._lock = threading.Lock()
        self._history: deque[tuple[int, int]] = deque(maxlen=COMPLETION_HISTORY)

    def set_addrs(self, addrs: tuple[str, ...]) -> None:
        with self._lock:
            self.addrs = tuple(addrs)
        self._reconcile()

    def set_session(self, index: int, session_id: bytes) -> None:
        with self._lock:
            self.sessions[index] = session_id
            if session_id == self.own_session:
                self.own_index = index
        self._reconcile()

    def apply_peer_list(self, addrs: tuple[str, ...], sessions: dict[int, bytes]) -> None:
        with self._lock:
            self.addrs = tuple(addrs)
            self.sessions.update(sessions)
            for i, sid in sessions.items():
                if sid == self.own_session:
                    self.own_index = i
        self._reconcile()

    def _reconcile(self) -> None:
        stale = []
        with self._lock:
            if self.own_index is None:
                return
            for i, addr in enumerate(self.addrs):
                sid = self.sessions.get(i)
                if i == self.own_index or sid is None:
                    continue
                link = self.links.get(i)
                if link is not None and link.addr == addr and link.peer_session == sid:
                    continue
                if link is not None:
                    stale.append(link)
                link = PeerLink(i, addr, sid, self._on_push_failed, self._sndbuf)
                link.seed(self._history)
                self.links[i] = link.start()
        for link in stale:
            link.close()

    def link(self, index: int) -> PeerLink:
        link = self.links.get(index)
        if link is None:
            raise LinkDown(f"no peer link to server {index}")
        return link

    def broadcast_completion(self, command_id: int, status: int) -> None:
        with self._lock:
            self._history.append((command_id, status))
            links = list(self.links.values())
        for link in links:
            link.send_completion(command_id, status)

    def confirm(self, origin_command_id: int) -> None:
        for link in list(self.links.values()):
            link.confirm(origin_command_id)

    def states(self) -> dict[int, LinkState]:
        return {i: link.state for i, link in self.links.items()}

    def close(self) -> None:
        for link in list(self.links.values()):
            link.close()
