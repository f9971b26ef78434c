import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedboost import transport
from fedboost.errors import (
    ChannelClosed,
    FrameTooLarge,
    ProtocolViolation,
    TransportError,
    TransportTimeout,
)


class TestFrameCodec:
    def test_layout(self):
        frame = transport.encode_frame(7, b"abc")
        assert frame == struct.pack(">I", 4) + bytes([7]) + b"abc"

    def test_roundtrip_empty_body(self):
        kind, body = transport.decode_frame(transport.encode_frame(3, b""))
        assert (kind, body) == (3, b"")

    def test_self_delimiting_concatenation(self):
        a = transport.encode_frame(1, b"first")
        b = transport.encode_frame(2, b"second frame")
        blob = a + b
        (length,) = struct.unpack_from(">I", blob)
        first, rest = blob[: 4 + length], blob[4 + length :]
        assert transport.decode_frame(first) == (1, b"first")
        assert transport.decode_frame(rest) == (2, b"second frame")

    def test_oversize_rejected(self):
        with pytest.raises(FrameTooLarge):
            transport.encode_frame(1, b"x" * 32, max_frame=16)

    def test_zero_length_rejected(self):
        with pytest.raises(ProtocolViolation):
            transport.decode_frame(struct.pack(">I", 0))

    @settings(max_examples=60, deadline=None)
    @given(kind=st.integers(0, 255), body=st.binary(max_size=512))
    def test_roundtrip_property(self, kind, body):
        assert transport.decode_frame(transport.encode_frame(kind, body)) == (kind, body)


class TestLoopback:
    def test_bit_exact_roundtrip(self):
        a, b = transport.loopback_pair(capacity=4)
        a.send(9, b"\x00\xffpayload")
        assert b.recv(timeout=1) == (9, b"\x00\xffpayload")

    def test_fifo_order(self):
        a, b = transport.loopback_pair(capacity=4)
        a.send(1, b"first")
        a.send(2, b"second")
        assert b.recv(timeout=1)[1] == b"first"
        assert b.recv(timeout=1)[1] == b"second"

    def test_bidirectional(self):
        a, b = transport.loopback_pair(capacity=4)
        a.send(1, b"ping")
        assert b.recv(timeout=1) == (1, b"ping")
        b.send(2, b"pong")
        assert a.recv(timeout=1) == (2, b"pong")

    def test_send_after_close(self):
        a, _b = transport.loopback_pair(capacity=1)
        a.close()
        with pytest.raises(ChannelClosed):
            a.send(1, b"late")

    def test_recv_on_closed_empty_channel(self):
        a, b = transport.loopback_pair(capacity=1)
        a.close()
        with pytest.raises(ChannelClosed):
            b.recv(timeout=1)

    def test_recv_drains_before_close(self):
        a, b = transport.loopback_pair(capacity=2)
        a.send(1, b"data")
        a.close()
        assert b.recv(timeout=1) == (1, b"data")
        with pytest.raises(ChannelClosed):
            b.recv(timeout=1)

    def test_recv_timeout(self):
        _a, b = transport.loopback_pair(capacity=1)
        start = time.monotonic()
        with pytest.raises(TransportTimeout):
            b.recv(timeout=0.05)
        assert time.monotonic() - start < 1.0

    def test_capacity_validated(self):
        with pytest.raises(ValueError):
            transport.loopback_pair(capacity=0)


@pytest.fixture()
def tcp_pair():
    listener = transport.tcp_listen("127.0.0.1:0")
    client_box = {}

    def _connect():
        client_box["ep"] = transport.tcp_connect(listener.address)

    thread = threading.Thread(target=_connect)
    thread.start()
    server_ep = listener.accept(timeout=5)
    thread.join()
    yield client_box["ep"], server_ep
    client_box["ep"].close()
    server_ep.close()
    listener.close()


class TestTcp:
    def test_one_byte_body_roundtrip(self, tcp_pair):
        client, server = tcp_pair
        client.send(5, b"z")
        assert server.recv(timeout=5) == (5, b"z")

    def test_large_frame_roundtrip(self, tcp_pair):
        client, server = tcp_pair
        body = bytes(range(256)) * 1024
        client.send(8, body)
        assert server.recv(timeout=5) == (8, body)

    def test_split_frame_reassembled(self):
        # the frame is pushed through the raw socket in two delayed segments
        listener = transport.tcp_listen("127.0.0.1:0")
        frame = transport.encode_frame(4, b"split across segments")

        def _send_in_pieces():
            raw = socket.create_connection(listener.address)
            raw.sendall(frame[:7])
            time.sleep(0.05)
            raw.sendall(frame[7:])
            time.sleep(0.05)
            raw.close()

        thread = threading.Thread(target=_send_in_pieces)
        thread.start()
        server_ep = listener.accept(timeout=5)
        assert server_ep.recv(timeout=5) == (4, b"split across segments")
        thread.join()
        server_ep.close()
        listener.close()

    def test_zero_declared_length_violates_protocol(self):
        listener = transport.tcp_listen("127.0.0.1:0")

        def _send_bad():
            raw = socket.create_connection(listener.address)
            raw.sendall(struct.pack(">I", 0))
            time.sleep(0.1)
            raw.close()

        thread = threading.Thread(target=_send_bad)
        thread.start()
        server_ep = listener.accept(timeout=5)
        with pytest.raises(ProtocolViolation):
            server_ep.recv(timeout=5)
        thread.join()
        listener.close()

    def test_oversize_declared_length_rejected(self):
        listener = transport.tcp_listen("127.0.0.1:0", max_frame=64)

        def _send_big():
            raw = socket.create_connection(listener.address)
            raw.sendall(struct.pack(">I", 10_000))
            time.sleep(0.1)
            raw.close()

        thread = threading.Thread(target=_send_big)
        thread.start()
        server_ep = listener.accept(timeout=5)
        with pytest.raises(FrameTooLarge):
            server_ep.recv(timeout=5)
        thread.join()
        listener.close()

    def test_connect_failure(self):
        with pytest.raises(TransportError):
            transport.tcp_connect("127.0.0.1:1", timeout=0.2)

    def test_bad_address(self):
        with pytest.raises(TransportError):
            transport.tcp_listen("no-port-here")

    def test_recv_timeout(self, tcp_pair):
        _client, server = tcp_pair
        with pytest.raises(TransportTimeout):
            server.recv(timeout=0.05)

    def test_peer_close_detected(self, tcp_pair):
        client, server = tcp_pair
        client.close()
        with pytest.raises(ChannelClosed):
            server.recv(timeout=5)


class TestReplay:
    def test_replays_in_order_then_closes(self):
        frames = [transport.encode_frame(1, b"a"), transport.encode_frame(2, b"b")]
        ep = transport.ReplayEndpoint(frames)
        assert ep.recv() == (1, b"a")
        assert ep.recv() == (2, b"b")
        with pytest.raises(ChannelClosed):
            ep.recv()

    def test_records_sends(self):
        ep = transport.ReplayEndpoint([])
        ep.send(3, b"out")
        assert ep.sent == [transport.encode_frame(3, b"out")]
