import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from peerlace.msgqueue import MessageNotFound, Queue, QueueService


def test_send_count_and_ids():
    q = Queue("sync")
    a = q.send(0, b"a")
    assert q.count() == 1
    b = q.send(1, b"b")
    assert a != b
    assert [m.payload for m in q.receive(10)] == [b"a", b"b"]


def test_receive_is_a_peek():
    q = Queue("sync")
    assert q.receive(5) == []
    for i in range(3):
        q.send(i, bytes([i]))
    first = q.receive(10)
    assert q.receive(10) == first
    assert [m.sender_rank for m in q.receive(1)] == [0]
    with pytest.raises(ValueError):
        q.receive(0)


def test_delete_purge_count():
    q = Queue("sync")
    ids = [q.send(i, b"x") for i in range(5)]
    q.delete(ids[2])
    assert q.count() == 4
    with pytest.raises(MessageNotFound):
        q.delete(ids[2])
    q.purge()
    assert q.count() == 0
    q.purge()
    assert q.count() == 0


def test_ids_unique_after_purge():
    q = Queue("sync")
    a = q.send(0, b"x")
    q.purge()
    assert q.send(0, b"y") != a


@given(st.lists(st.booleans(), max_size=60))
def test_count_equals_sends_minus_deletes(ops):
    q = Queue("q")
    live = []
    for is_send in ops:
        if is_send or not live:
            live.append(q.send(0, b""))
        else:
            q.delete(live.pop(0))
    assert q.count() == len(live)


def test_enqueue_time_follows_clock():
    now = [0]
    svc = QueueService(lambda: now[0])
    svc["a"].send(0, b"x")
    now[0] = 7
    svc["a"].send(0, b"y")
    assert [m.enqueue_time for m in svc["a"].receive(5)] == [0, 7]
    assert svc.queue("a") is svc["a"]
    assert svc.names() == ["a"]


def test_drain_returns_and_removes():
    q = Queue("q")
    q.send(1, b"a")
    q.send(2, b"b")
    assert [m.sender_rank for m in q.drain()] == [1, 2]
    assert q.count() == 0


def test_concurrent_producers_lose_nothing():
    q = Queue("q")

    def producer(r):
        for i in range(500):
            q.send(r, f"{r}:{i}".encode())

    threads = [threading.Thread(target=producer, args=(r,)) for r in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    msgs = q.drain()
    assert len(msgs) == 3000 == len({m.id for m in msgs})
    for r in range(6):
        mine = [int(m.payload.decode().split(":")[1]) for m in msgs if m.sender_rank == r]
        assert mine == list(range(500))
