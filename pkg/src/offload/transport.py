"""Sockets, counted streams and the reader/writer worker pair per connection."""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Callable

from . import protocol
from .protocol import Message

log = logging.getLogger(__name__)

_CLOSE = object()


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {addr!r}")
    return host.strip("[]"), int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def tune(sock: socket.socket, sndbuf: int | None = None) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if sndbuf:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, sndbuf)


def dial(addr: str | tuple[str, int], timeout: float = 5.0, source: tuple[str, int] | None = None,
         sndbuf: int | None = None) -> socket.socket:
    if isinstance(addr, str):
        addr = parse_addr(addr)
    sock = socket.create_connection(addr, timeout=timeout, source_address=source)
    sock.settimeout(None)
    tune(sock, sndbuf)
    return sock


class Counters:
    def __init__(self) -> None:
        self.bytes_in = 0
        self.bytes_out = 0
        self.frames_in = 0
        self.frames_out = 0


class SocketStream:
    """Blocking ``read(n)`` over a socket that counts received bytes."""

    def __init__(self, sock: socket.socket, counters: Counters | None = None) -> None:
        self.sock = sock
        self.counters = counters or Counters()

    def read(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(view[got:], n - got)
            except OSError:
                k = 0
            if k == 0:
                break
            got += k
            self.counters.bytes_in += k
        return bytes(buf[:got]) if got < n else bytes(buf)

    def write(self, data: bytes) -> None:
        self.sock.sendall(data)
        self.counters.bytes_out += len(data)


def close_socket(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()


class Connection:
    """One socket with a reader worker and a writer worker.

    The reader blocks on :func:`protocol.decode_frame` and hands each message
    to ``on_message``.  The writer drains an outbound queue.  Whichever side
    fails first closes the socket; the writer then calls ``on_close`` once
    with every message it could not send.
    """

    def __init__(
        self,
        sock: socket.socket,
        name: str,
        on_message: Callable[[Connection, Message], None] | None,
        on_close: Callable[[Connection, list], None] | None = None,
    ) -> None:
        self.sock = sock
        self.name = name
        self.counters = Counters()
        self.stream = SocketStream(sock, self.counters)
        self.on_message = on_message
        self.on_close = on_close
        self.outbound: queue.Queue = queue.Queue()
        self.closed = threading.Event()
        self._close_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"{name}-writer", daemon=True)

    def start(self) -> Connection:
        if self.on_message is not None:
            self._reader.start()
        self._writer.start()
        return self

    def send(self, msg: Message, on_sent: Callable[[], None] | None = None) -> bool:
        if self.closed.is_set():
            return False
        self.outbound.put((msg, on_sent))
        return True

    def _read_loop(self) -> None:
        try:
            while not self.closed.is_set():
                msg = protocol.decode_frame(self.stream)
                self.counters.frames_in += 1
                self.on_message(self, msg)
        except protocol.Truncated:
            log.debug("%s: peer closed", self.name)
        except protocol.ProtocolError as e:
            log.warning("%s: protocol error, dropping connection: %s", self.name, e)
        except Exception:
            log.exception("%s: reader failed", self.name)
        self.close()

    def _write_loop(self) -> None:
        failed = None
        while True:
            item = self.outbound.get()
            if item is _CLOSE:
                break
            msg, on_sent = item
            try:
                self.stream.write(protocol.encode_frame(msg))
            except OSError:
                failed = msg
                break
            self.counters.frames_out += 1
            if on_sent is not None:
                on_sent()
        self.close()
        leftovers = [] if failed is None else [failed]
        while True:
            try:
                item = self.outbound.get_nowait()
            except queue.Empty:
                break
            if item is not _CLOSE:
                leftovers.append(item[0])
        if self.on_close is not None:
            try:
                self.on_close(self, leftovers)
            except Exception:
                log.exception("%s: close handler failed", self.name)

    def close(self) -> None:
        """Shut the socket down; the writer reports unsent messages to ``on_close``."""
        with self._close_lock:
            if self.closed.is_set():
                return
            self.closed.set()
        close_socket(self.sock)
        self.outbound.put(_CLOSE)
