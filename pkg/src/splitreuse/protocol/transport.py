"""Point-to-point links between a client and the server.

Every message is framed, recorded in the sender's ledger, moved as raw bytes,
decoded and recorded again in the receiver's ledger. The in-process link is the
reference; the socket link moves the identical bytes through an OS socket pair.
"""

from __future__ import annotations

import queue
import socket
import threading
from collections import deque

from ..errors import TransportError
from .ledger import CommLedger
from .wire import HEADER_SIZE, Message, decode_frame, decode_header, encode_frame


class Link:
    """One client's bidirectional link; ``direction`` is ``"up"`` (client->server) or ``"down"``."""

    def __init__(self, client_id: int, sender_ledgers: dict, receiver_ledgers: dict):
        self.client_id = client_id
        self.sender_ledgers = sender_ledgers        # direction -> ledger of the sending party
        self.receiver_ledgers = receiver_ledgers    # direction -> ledger of the receiving party

    def _put(self, direction: str, frame: bytes) -> None:
        raise NotImplementedError

    def _get(self, direction: str) -> bytes:
        raise NotImplementedError

    def send(self, msg: Message, direction: str, interface: str = "") -> None:
        if msg.client_id != self.client_id:
            raise TransportError(f"message for client {msg.client_id} sent on link {self.client_id}")
        self.sender_ledgers[direction].record(msg, direction, interface)
        self._put(direction, encode_frame(msg))

    def recv(self, direction: str, interface: str = "") -> Message:
        msg = decode_frame(self._get(direction))
        self.receiver_ledgers[direction].record(msg, direction, interface)
        return msg

    def transfer(self, msg: Message, direction: str, interface: str = "") -> Message:
        self.send(msg, direction, interface)
        return self.recv(direction, interface)

    def close(self) -> None:
        pass


class InProcessLink(Link):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self._q = {"up": deque(), "down": deque()}

    def _put(self, direction, frame):
        self._q[direction].append(frame)

    def _get(self, direction):
        try:
            return self._q[direction].popleft()
        except IndexError:
            raise TransportError(f"client {self.client_id}: nothing to receive on {direction}link") from None


class SocketLink(Link):
    """Frames travel through a ``socket.socketpair`` per direction; a reader thread drains each."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self._socks = {d: socket.socketpair() for d in ("up", "down")}
        self._inbox = {d: queue.Queue() for d in ("up", "down")}
        self._threads = []
        for d, (_, rx) in self._socks.items():
            t = threading.Thread(target=self._reader, args=(d, rx), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, direction, sock):
        def read_exact(n):
            buf = bytearray()
            while len(buf) < n:
                chunk = sock.recv(n - len(buf))
                if not chunk:
                    return None
                buf += chunk
            return bytes(buf)

        while True:
            head = read_exact(HEADER_SIZE)
            if head is None:
                return
            n = decode_header(head)[4]
            body = read_exact(n) if n else b""
            self._inbox[direction].put(head + body)

    def _put(self, direction, frame):
        try:
            self._socks[direction][0].sendall(frame)
        except OSError as e:
            raise TransportError(str(e)) from e

    def _get(self, direction):
        try:
            return self._inbox[direction].get(timeout=30)
        except queue.Empty:
            raise TransportError(f"client {self.client_id}: receive timed out") from None

    def close(self):
        for tx, rx in self._socks.values():
            tx.close()
        for t in self._threads:
            t.join(timeout=5)
        for tx, rx in self._socks.values():
            rx.close()


class Network:
    """All links of a run plus the per-party ledgers (client side and server side)."""

    def __init__(self, num_clients: int, kind: str = "inprocess"):
        cls = {"inprocess": InProcessLink, "socket": SocketLink}.get(kind)
        if cls is None:
            raise TransportError(f"unknown transport {kind!r}")
        self.kind = kind
        self.client_ledger = CommLedger()     # everything any client sent or received
        self.server_ledger = CommLedger()
        senders = {"up": self.client_ledger, "down": self.server_ledger}
        receivers = {"up": self.server_ledger, "down": self.client_ledger}
        self.links = [cls(i, senders, receivers) for i in range(num_clients)]

    def close(self) -> None:
        for link in self.links:
            link.close()
