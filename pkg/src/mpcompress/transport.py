"""Ordered, reliable byte-frame channels between adjacent pipeline stages.

``in_process`` hands frames over a thread-safe queue.  ``loopback_socket``
writes ``u32 LE length | frame`` records to a TCP connection on 127.0.0.1,
using one connection per link direction.  A writer thread drains an outgoing
queue so a sender never blocks on a full socket buffer while the same thread
still has to read the other end.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading

TRANSPORTS = ("in_process", "loopback_socket")

_LEN = struct.Struct("<I")


class TransportError(RuntimeError):
    pass


_CLOSED = object()


class InProcessChannel:
    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self._closed = False

    def send(self, frame: bytes) -> None:
        if self._closed:
            raise TransportError("send on a closed channel")
        self._q.put(bytes(frame))

    def recv(self, timeout: float | None = 60.0) -> bytes:
        try:
            frame = self._q.get(timeout=timeout)
        except queue.Empty as exc:
            raise TransportError("timed out waiting for a frame") from exc
        if frame is _CLOSED:
            self._q.put(_CLOSED)
            raise TransportError("channel closed")
        return frame

    def close(self) -> None:
        # wakes a receiver blocked in another thread
        self._closed = True
        self._q.put(_CLOSED)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


class SocketChannel:
    def __init__(self, timeout: float = 60.0):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
            listener.bind(("127.0.0.1", 0))
            listener.listen(1)
            self._tx = socket.create_connection(listener.getsockname(), timeout=timeout)
            self._rx, _ = listener.accept()
        self._rx.settimeout(timeout)
        for s in (self._tx, self._rx):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._out: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def _drain(self) -> None:
        while True:
            frame = self._out.get()
            if frame is None:
                return
            try:
                self._tx.sendall(_LEN.pack(len(frame)) + frame)
            except OSError as exc:
                self._error = exc
                return

    def send(self, frame: bytes) -> None:
        if self._error is not None:
            raise TransportError(f"socket writer failed: {self._error}")
        self._out.put(bytes(frame))

    def recv(self) -> bytes:
        try:
            (n,) = _LEN.unpack(_recv_exact(self._rx, _LEN.size))
            return _recv_exact(self._rx, n)
        except OSError as exc:
            raise TransportError(f"socket receive failed: {exc}") from exc

    def close(self) -> None:
        self._out.put(None)
        self._writer.join(timeout=5)
        for s in (self._tx, self._rx):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass


def make_channel(kind: str):
    if kind == "in_process":
        return InProcessChannel()
    if kind == "loopback_socket":
        return SocketChannel()
    raise ValueError(f"unknown transport {kind!r}; choose from {TRANSPORTS}")
