"""A bare protocol client for poking daemons without the client runtime."""

from __future__ import annotations

import socket

from offload import protocol as p
from offload.transport import SocketStream, dial


class RawClient:
    def __init__(self, addr: str, session: bytes = p.ZERO_SESSION, role: p.Role = p.Role.CLIENT,
                 source: tuple[str, int] | None = None) -> None:
        self.sock = dial(addr, source=source)
        self.sock.settimeout(5.0)
        self.stream = SocketStream(self.sock)
        self.stream.write(p.encode_handshake(p.Handshake(role, session)))
        self.reply = p.read_handshake_reply(self.stream)
        self.session = self.reply.session_id

    def send(self, *msgs: p.Message) -> None:
        self.stream.write(b"".join(p.encode_frame(m) for m in msgs))

    def recv(self) -> p.Message:
        return p.decode_frame(self.stream)

    def replies(self, count: int) -> dict[int, p.Message]:
        """Collect ``count`` replies keyed by the command id they answer."""
        out = {}
        while len(out) < count:
            m = self.recv()
            out[m.acked_command_id if isinstance(m, p.Ack) else m.command_id] = m
        return out

    def call(self, msg: p.Message) -> p.Message:
        self.send(msg)
        return self.replies(1)[msg.command_id]

    def closed_by_peer(self) -> bool:
        try:
            return self.sock.recv(1) == b""
        except (socket.timeout, OSError):
            return False

    def close(self) -> None:
        self.sock.close()
