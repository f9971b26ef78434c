"""Message transports: a deterministic in-process loopback and framed TCP.

One frame on the wire is a 4-byte big-endian length (counting everything that
follows), one kind byte, then the UTF-8 body; so length == len(body) + 1.
Frames are delivered whole or not at all, and both transports carry identical
bytes for identical protocol runs.
"""

from __future__ import annotations

import queue
import socket
import struct
import time

from .errors import ChannelClosed, FrameTooLarge, ProtocolViolation, TransportError, TransportTimeout

MAX_FRAME_BYTES = 64 * 1024 * 1024

_HEADER = struct.Struct(">I")
_CLOSE_SENTINEL = object()


def encode_frame(kind: int, body: bytes, max_frame: int = MAX_FRAME_BYTES) -> bytes:
    if not (0 <= kind <= 255):
        raise ValueError(f"kind must fit one byte, got {kind}")
    length = len(body) + 1
    if length > max_frame:
        raise FrameTooLarge(f"frame of {length} bytes exceeds limit {max_frame}")
    return _HEADER.pack(length) + bytes([kind]) + body


def decode_frame(data: bytes, max_frame: int = MAX_FRAME_BYTES) -> tuple[int, bytes]:
    if len(data) < _HEADER.size + 1:
        raise ProtocolViolation(f"frame truncated at {len(data)} bytes")
    (length,) = _HEADER.unpack_from(data)
    if length < 1:
        raise ProtocolViolation("declared length omits the kind byte")
    if length > max_frame:
        raise FrameTooLarge(f"declared length {length} exceeds limit {max_frame}")
    if len(data) != _HEADER.size + length:
        raise ProtocolViolation(
            f"declared length {length} does not match payload of {len(data) - _HEADER.size}"
        )
    return data[_HEADER.size], data[_HEADER.size + 1 :]


class LoopbackEndpoint:
    """One side of an in-process channel; FIFO, lossless, in-order."""

    def __init__(self, outgoing: queue.Queue, incoming: queue.Queue, max_frame: int):
        self._outgoing = outgoing
        self._incoming = incoming
        self._max_frame = max_frame
        self._send_closed = False

    def send(self, kind: int, body: bytes) -> None:
        if self._send_closed:
            raise ChannelClosed("send after close")
        self._outgoing.put(encode_frame(kind, body, self._max_frame))

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                item = self._incoming.get(timeout=remaining if remaining is not None else None)
            except queue.Empty:
                raise TransportTimeout(f"no frame within {timeout}s") from None
            if item is _CLOSE_SENTINEL:
                raise ChannelClosed("peer closed the channel")
            return decode_frame(item, self._max_frame)

    def close(self) -> None:
        if not self._send_closed:
            self._send_closed = True
            self._outgoing.put(_CLOSE_SENTINEL)


def loopback_pair(
    capacity: int = 64, max_frame: int = MAX_FRAME_BYTES
) -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    # +1 keeps room for the close sentinel even when the data queue is full
    a_to_b: queue.Queue = queue.Queue(maxsize=capacity + 1)
    b_to_a: queue.Queue = queue.Queue(maxsize=capacity + 1)
    return (
        LoopbackEndpoint(a_to_b, b_to_a, max_frame),
        LoopbackEndpoint(b_to_a, a_to_b, max_frame),
    )


def _parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        host, port = addr
        return str(host), int(port)
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"address must be host:port, got {addr!r}")
    return host, int(port)


class TcpEndpoint:
    """Framed stream over one connected socket; reassembles partial reads."""

    def __init__(self, sock: socket.socket, max_frame: int = MAX_FRAME_BYTES):
        self._sock = sock
        self._max_frame = max_frame
        self._closed = False

    def send(self, kind: int, body: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send after close")
        try:
            self._sock.sendall(encode_frame(kind, body, self._max_frame))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _recv_exact(self, nbytes: int, deadline: float | None) -> bytes:
        chunks = []
        got = 0
        while got < nbytes:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout("read deadline exceeded")
                self._sock.settimeout(remaining)
            else:
                self._sock.settimeout(None)
            try:
                chunk = self._sock.recv(nbytes - got)
            except socket.timeout:
                raise TransportTimeout("read deadline exceeded") from None
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise ChannelClosed("connection closed mid-stream")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        if self._closed:
            raise ChannelClosed("recv after close")
        deadline = None if timeout is None else time.monotonic() + timeout
        header = self._recv_exact(_HEADER.size, deadline)
        (length,) = _HEADER.unpack(header)
        if length < 1:
            self.close()
            raise ProtocolViolation("declared length omits the kind byte")
        if length > self._max_frame:
            self.close()
            raise FrameTooLarge(f"declared length {length} exceeds limit {self._max_frame}")
        payload = self._recv_exact(length, deadline)
        return payload[0], payload[1:]

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class TcpListener:
    def __init__(self, sock: socket.socket, max_frame: int):
        self._sock = sock
        self._max_frame = max_frame

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpEndpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _peer = self._sock.accept()
        except socket.timeout:
            raise TransportTimeout(f"no connection within {timeout}s") from None
        except OSError as exc:
            raise TransportError(f"accept failed: {exc}") from exc
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpEndpoint(conn, self._max_frame)

    def close(self) -> None:
        self._sock.close()


def tcp_listen(addr, max_frame: int = MAX_FRAME_BYTES, backlog: int = 16) -> TcpListener:
    host, port = _parse_addr(addr)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
    return TcpListener(sock, max_frame)


def tcp_connect(addr, max_frame: int = MAX_FRAME_BYTES, timeout: float = 30.0) -> TcpEndpoint:
    host, port = _parse_addr(addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return TcpEndpoint(sock, max_frame)


class ReplayEndpoint:
    """Feeds a prerecorded inbound frame sequence; records what gets sent."""

    def __init__(self, frames: list[bytes], max_frame: int = MAX_FRAME_BYTES):
        self._frames = list(frames)
        self._max_frame = max_frame
        self.sent: list[bytes] = []

    def send(self, kind: int, body: bytes) -> None:
        self.sent.append(encode_frame(kind, body, self._max_frame))

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        if not self._frames:
            raise ChannelClosed("replay exhausted")
        return decode_frame(self._frames.pop(0), self._max_frame)

    def close(self) -> None:
        pass
