import hashlib
import threading
import time

import pytest

from securefl.errors import Timeout
from securefl.transport import InProcessTransport, SocketTransport, broadcast, gather, make_transport, scatter

KINDS = ["inproc", "socket"]


@pytest.mark.parametrize("kind", KINDS)
def test_in_order_intact_delivery(kind):
    with make_transport(kind, 2) as t:
        msgs = [bytes([i]) * (i * 9000 + 1) for i in range(6)]
        for m in msgs:
            t.send(1, m)
        ep = t.endpoint(1)
        assert [ep.recv(2.0) for _ in msgs] == msgs
        ep.send(b"")
        ep.send(b"up")
        assert t.recv(1, 2.0) == b"" and t.recv(1, 2.0) == b"up"


@pytest.mark.parametrize("kind", KINDS)
def test_broadcast_is_identical_everywhere(kind):
    with make_transport(kind, 4) as t:
        payload = bytes(range(256)) * 300
        broadcast(t, payload)
        digests = {hashlib.sha256(t.endpoint(i).recv(2.0)).hexdigest() for i in range(4)}
        assert digests == {hashlib.sha256(payload).hexdigest()}
        assert t.bytes_down == [len(payload)] * 4


@pytest.mark.parametrize("kind", KINDS)
def test_scatter_and_gather(kind):
    with make_transport(kind, 3) as t:
        scatter(t, {i: f"key{i}".encode() for i in range(3)})
        for i in range(3):
            assert t.endpoint(i).recv(2.0) == f"key{i}".encode()
        with pytest.raises(ValueError):
            scatter(t, {0: b"a", 1: b"b"})
        for i in (2, 0, 1):
            t.endpoint(i).send(f"update{i}".encode())
        assert gather(t, timeout=2.0) == {i: f"update{i}".encode() for i in range(3)}
        assert t.bytes_up == [7, 7, 7]


@pytest.mark.parametrize("kind", KINDS)
def test_gather_names_silent_client(kind):
    with make_transport(kind, 3) as t:
        t.endpoint(0).send(b"a")
        t.endpoint(2).send(b"c")
        start = time.monotonic()
        with pytest.raises(Timeout) as info:
            gather(t, timeout=5.0)
        assert info.value.client_ids == [1]
        assert 4.5 <= time.monotonic() - start < 8.0


def test_socket_reassembles_split_frames():
    t = SocketTransport(1)
    try:
        raw = t._client_side[0].sock
        data = b"z" * 70_000
        frame = len(data).to_bytes(4, "little") + data

        def dribble():
            for k in range(0, len(frame), 4093):
                raw.sendall(frame[k:k + 4093])
                time.sleep(0.001)

        th = threading.Thread(target=dribble)
        th.start()
        assert t.recv(0, 5.0) == data
        th.join()
    finally:
        t.close()


def test_frame_log_and_capture():
    t = InProcessTransport(2, capture=True)
    t.send(0, b"abc")
    t.endpoint(1).send(b"de")
    t.recv(1)
    assert [(f.direction, f.client_id, f.size) for f in t.frames] == [("down", 0, 3), ("up", 1, 2)]
    assert t.payloads == [("down", 0, b"abc"), ("up", 1, b"de")]


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon", 1)
