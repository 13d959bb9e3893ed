"""Point-to-point transports and the collectives built on them.

A transport connects one server to ``m`` clients.  Messages are opaque byte
strings (serialized envelopes), delivered intact and in order per
server/client pair.  Two implementations share the same framing semantics:
in-process queues and TCP stream sockets, where each message is prefixed with
its length as a little-endian u32.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Mapping

from .errors import Timeout

_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class Frame:
    direction: str  # "down" (server -> client) or "up"
    client_id: int
    size: int
    digest: str


class _Closed(Exception):
    pass


class Transport:
    """Server-side view plus per-client endpoints."""

    kind = "abstract"

    def __init__(self, n_clients: int, record_frames: bool = True, capture: bool = False):
        if n_clients < 1:
            raise ValueError("a transport needs at least one client")
        self.n_clients = n_clients
        self.record_frames = record_frames
        self.capture = capture
        self.frames: list[Frame] = []
        # raw (direction, client_id, bytes) when capture is on; for tests and audits
        self.payloads: list[tuple[str, int, bytes]] = []
        self.bytes_down = [0] * n_clients
        self.bytes_up = [0] * n_clients
        self._lock = threading.Lock()

    def _log(self, direction: str, client_id: int, data: bytes) -> None:
        with self._lock:
            if direction == "down":
                self.bytes_down[client_id] += len(data)
            else:
                self.bytes_up[client_id] += len(data)
            if self.record_frames:
                self.frames.append(Frame(direction, client_id, len(data), hashlib.sha256(data).hexdigest()))
            if self.capture:
                self.payloads.append((direction, client_id, bytes(data)))

    # server side
    def send(self, client_id: int, data: bytes) -> None:
        self._log("down", client_id, data)
        self._send_down(client_id, bytes(data))

    def recv(self, client_id: int, timeout: float | None = None) -> bytes:
        data = self._recv_up(client_id, timeout)
        self._log("up", client_id, data)
        return data

    def endpoint(self, client_id: int) -> "ClientEndpoint":
        return ClientEndpoint(self, client_id)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # implementation hooks
    def _send_down(self, client_id, data):
        raise NotImplementedError

    def _recv_up(self, client_id, timeout):
        raise NotImplementedError

    def _send_up(self, client_id, data):
        raise NotImplementedError

    def _recv_down(self, client_id, timeout):
        raise NotImplementedError


class ClientEndpoint:
    def __init__(self, transport: Transport, client_id: int):
        self.transport = transport
        self.client_id = client_id

    def send(self, data: bytes) -> None:
        self.transport._send_up(self.client_id, bytes(data))

    def recv(self, timeout: float | None = None) -> bytes:
        return self.transport._recv_down(self.client_id, timeout)


class InProcessTransport(Transport):
    kind = "inproc"

    def __init__(self, n_clients: int, record_frames: bool = True, capture: bool = False):
        super().__init__(n_clients, record_frames, capture)
        self._down = [queue.Queue() for _ in range(n_clients)]
        self._up = [queue.Queue() for _ in range(n_clients)]

    @staticmethod
    def _get(q, client_id, timeout):
        try:
            item = q.get(timeout=timeout)
        except queue.Empty:
            raise Timeout([client_id], timeout) from None
        if item is None:
            raise _Closed()
        return item

    def _send_down(self, client_id, data):
        self._down[client_id].put(data)

    def _recv_up(self, client_id, timeout):
        return self._get(self._up[client_id], client_id, timeout)

    def _send_up(self, client_id, data):
        self._up[client_id].put(data)

    def _recv_down(self, client_id, timeout):
        return self._get(self._down[client_id], client_id, timeout)

    def close(self):
        for q in self._down:
            q.put(None)


class _FramedSocket:
    """Length-prefixed framing over a stream socket; keeps partial reads."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()
        self.lock = threading.Lock()

    def send(self, data: bytes) -> None:
        with self.lock:
            self.sock.sendall(_LEN.pack(len(data)) + data)

    def _fill(self, n, deadline, client_id, timeout):
        while len(self.buf) < n:
            if deadline is None:
                self.sock.settimeout(None)
            else:
                # past the deadline we still drain whatever already arrived
                self.sock.settimeout(max(0.0, deadline - time.monotonic()))
            try:
                chunk = self.sock.recv(max(65536, n - len(self.buf)))
            except (socket.timeout, BlockingIOError):
                raise Timeout([client_id], timeout) from None
            except OSError:
                raise _Closed() from None
            if not chunk:
                raise _Closed()
            self.buf.extend(chunk)

    def recv(self, client_id, timeout) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        self._fill(_LEN.size, deadline, client_id, timeout)
        (n,) = _LEN.unpack_from(self.buf, 0)
        self._fill(_LEN.size + n, deadline, client_id, timeout)
        data = bytes(self.buf[_LEN.size:_LEN.size + n])
        del self.buf[:_LEN.size + n]
        return data

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SocketTransport(Transport):
    """TCP over loopback, one connection per client."""

    kind = "socket"

    def __init__(self, n_clients: int, host: str = "127.0.0.1", record_frames: bool = True,
                 capture: bool = False):
        super().__init__(n_clients, record_frames, capture)
        self._server_side: list[_FramedSocket] = []
        self._client_side: list[_FramedSocket] = []
        with socket.create_server((host, 0)) as listener:
            addr = listener.getsockname()
            for _ in range(n_clients):
                c = socket.create_connection(addr)
                s, _ = listener.accept()
                for sock in (c, s):
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._client_side.append(_FramedSocket(c))
                self._server_side.append(_FramedSocket(s))

    def _send_down(self, client_id, data):
        self._server_side[client_id].send(data)

    def _recv_up(self, client_id, timeout):
        return self._server_side[client_id].recv(client_id, timeout)

    def _send_up(self, client_id, data):
        self._client_side[client_id].send(data)

    def _recv_down(self, client_id, timeout):
        return self._client_side[client_id].recv(client_id, timeout)

    def close(self):
        for fs in self._server_side + self._client_side:
            fs.close()


def make_transport(kind: str, n_clients: int, **kw) -> Transport:
    if kind == "inproc":
        return InProcessTransport(n_clients, **kw)
    if kind == "socket":
        return SocketTransport(n_clients, **kw)
    raise ValueError(f"unknown transport {kind!r}")


# --- collectives -------------------------------------------------------------


def broadcast(transport: Transport, data: bytes) -> None:
    """Deliver the same payload to every client."""
    for i in range(transport.n_clients):
        transport.send(i, data)


def scatter(transport: Transport, payloads: Mapping[int, bytes]) -> None:
    """Deliver ``payloads[i]`` to client ``i``; every client must be covered."""
    missing = set(range(transport.n_clients)) - set(payloads)
    if missing:
        raise ValueError(f"scatter has no payload for client(s) {sorted(missing)}")
    for i in range(transport.n_clients):
        transport.send(i, payloads[i])


def gather(transport: Transport, timeout: float | None = None) -> dict[int, bytes]:
    """Block until one message per client arrives.

    Raises:
        Timeout: naming every client still silent when the deadline passes.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    out: dict[int, bytes] = {}
    missing = []
    for i in range(transport.n_clients):
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        try:
            out[i] = transport.recv(i, remaining)
        except Timeout:
            missing.append(i)
    if missing:
        raise Timeout(missing, timeout)
    return out
