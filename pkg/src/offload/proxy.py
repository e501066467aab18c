"""TCP forwarder that cuts connections on a byte or time schedule.

Byte offsets count client-to-upstream traffic cumulatively over the
proxy's lifetime, so a given schedule always cuts at the same points of a
deterministic command stream (including in the middle of frames).
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Sequence

from .transport import close_socket, dial, format_addr, parse_addr, tune

log = logging.getLogger(__name__)


class UpstreamUnreachable(OSError):
    pass


class FaultProxy:
    def __init__(
        self,
        upstream: str,
        listen: str = "127.0.0.1:0",
        cut_after: Sequence[int] = (),
        cut_every: int | None = None,
        cut_at: Sequence[float] = (),
    ) -> None:
        self.upstream = upstream
        self.listen = listen
        self.cut_after = sorted(cut_after)
        self.cut_every = cut_every
        self.cut_at = sorted(cut_at)
        self.forwarded = 0
        self.cut_log: list[int] = []
        self.address: str | None = None
        self._lock = threading.Lock()
        self._pairs: list[tuple[socket.socket, socket.socket]] = []
        self._listener: socket.socket | None = None
        self._stopped = threading.Event()

    def _next_cut(self) -> int | None:
        if self.cut_after:
            return self.cut_after[0]
        if self.cut_every:
            return (self.forwarded // self.cut_every + 1) * self.cut_every
        return None

    def start(self) -> FaultProxy:
        try:
            close_socket(dial(self.upstream, timeout=2.0))
        except OSError as e:
            raise UpstreamUnreachable(f"cannot reach {self.upstream}: {e}") from None
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(parse_addr(self.listen))
        sock.listen(16)
        self._listener = sock
        self.address = format_addr(sock.getsockname())
        threading.Thread(target=self._accept_loop, name="proxy-accept", daemon=True).start()
        if self.cut_at:
            threading.Thread(target=self._timer, name="proxy-timer", daemon=True).start()
        log.info("proxy %s -> %s", self.address, self.upstream)
        return self

    def run(self) -> None:
        if self.address is None:
            self.start()
        self._stopped.wait()

    def refuse(self) -> None:
        """Stop accepting new connections; existing ones keep forwarding."""
        if self._listener is not None:
            close_socket(self._listener)

    def stop(self) -> None:
        self._stopped.set()
        self.refuse()
        self.cut_all()

    def __enter__(self) -> FaultProxy:
        return self.start() if self.address is None else self

    def __exit__(self, *exc) -> None:
        self.stop()

    def cut_all(self) -> None:
        with self._lock:
            pairs, self._pairs = self._pairs, []
        for a, b in pairs:
            close_socket(a)
            close_socket(b)

    def _timer(self) -> None:
        t0 = time.monotonic()
        for t in self.cut_at:
            if self._stopped.wait(max(0.0, t0 + t - time.monotonic())):
                return
            log.info("proxy: timed cut at %.3fs", t)
            self.cut_all()

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                client, _ = self._listener.accept()
            except OSError:
                return
            try:
                upstream = dial(self.upstream)
            except OSError as e:
                log.warning("proxy: upstream %s unreachable: %s", self.upstream, e)
                close_socket(client)
                continue
            tune(client)
            with self._lock:
                self._pairs.append((client, upstream))
            threading.Thread(target=self._pump_up, args=(client, upstream), daemon=True).start()
            threading.Thread(target=self._pump_down, args=(upstream, client), daemon=True).start()

    def _close_pair(self, a: socket.socket, b: socket.socket) -> None:
        with self._lock:
            self._pairs = [p for p in self._pairs if p != (a, b)]
        close_socket(a)
        close_socket(b)

    def _pump_up(self, client: socket.socket, upstream: socket.socket) -> None:
        while True:
            try:
                data = client.recv(65536)
            except OSError:
                data = b""
            if not data:
                break
            with self._lock:
                cut = self._next_cut()
                if cut is not None and self.forwarded + len(data) >= cut:
                    keep = cut - self.forwarded
                    data = data[:keep]
                    self.forwarded = cut
                    self.cut_log.append(cut)
                    if self.cut_after:
                        self.cut_after.pop(0)
                else:
                    cut = None
                    self.forwarded += len(data)
            try:
                if data:
                    upstream.sendall(data)
            except OSError:
                break
            if cut is not None:
                log.info("proxy: cut after %d bytes", cut)
                break
        self._close_pair(client, upstream)

    def _pump_down(self, upstream: socket.socket, client: socket.socket) -> None:
        while True:
            try:
                data = upstream.recv(65536)
                if not data:
                    break
                client.sendall(data)
            except OSError:
                break
        self._close_pair(client, upstream)
