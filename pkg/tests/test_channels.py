import collections
import pickle
import random
import subprocess
import sys
import threading
import time

import pytest

from taskforge.channels import (
    ChannelError,
    DistQueue,
    Pipe,
    PipeBroken,
    PipeClosed,
    PipeListener,
    QueueBroker,
    QueueClosed,
    connect_pipe,
)


@pytest.fixture
def broker():
    b = QueueBroker()
    yield b
    b.stop()


# ------------------------------------------------------------------ queue


def test_put_then_depth_and_get(broker):
    q = broker.create_queue()
    q.put(b"a")
    assert broker.depth(q.channel_id) == 1
    assert q.get() == b"a"
    assert broker.depth(q.channel_id) == 0


def test_put_blocks_at_capacity_until_get(broker):
    q = broker.create_queue(capacity=2)
    q.put(b"1")
    q.put(b"2")
    done = threading.Event()
    t = threading.Thread(target=lambda: (q.put(b"3"), done.set()))
    t.start()
    assert not done.wait(0.3)
    assert broker.depth(q.channel_id) == 2
    assert q.get() == b"1"
    assert done.wait(5)
    assert [q.get(), q.get()] == [b"2", b"3"]
    assert broker.max_depth(q.channel_id) == 2


def test_single_flow_is_fifo(broker):
    q = broker.create_queue()
    for i in range(1, 101):
        q.put(i.to_bytes(2, "big"))
    assert [int.from_bytes(q.get(), "big") for _ in range(100)] == list(range(1, 101))


def test_two_getters_one_item(broker):
    q = broker.create_queue()
    got = []
    lock = threading.Lock()

    def getter():
        try:
            item = q.get()
        except QueueClosed:
            return
        with lock:
            got.append(item)

    ts = [threading.Thread(target=getter) for _ in range(2)]
    for t in ts:
        t.start()
    time.sleep(0.1)
    q.put(b"only")
    time.sleep(0.2)
    q.close()
    for t in ts:
        t.join(5)
    assert got == [b"only"]


def test_close_drain_semantics(broker):
    q = broker.create_queue()
    q.put(b"x")
    q.put(b"y")
    q.close()
    with pytest.raises(QueueClosed):
        q.put(b"z")
    assert q.get() == b"x"
    assert q.get() == b"y"
    with pytest.raises(QueueClosed):
        q.get()
    q.close()  # idempotent


def test_close_wakes_blocked_getter(broker):
    q = broker.create_queue()
    err = []

    def getter():
        try:
            q.get()
        except QueueClosed as exc:
            err.append(exc)

    t = threading.Thread(target=getter)
    t.start()
    time.sleep(0.1)
    q.close()
    t.join(5)
    assert len(err) == 1


def test_multiset_conservation_3_producers_3_consumers(broker):
    q = broker.create_queue(capacity=16)
    produced = collections.Counter()
    consumed = collections.Counter()
    lock = threading.Lock()

    def producer(k):
        items = [f"{k}:{i}".encode() for i in range(100)]
        for it in items:
            q.put(it)
        with lock:
            produced.update(items)

    def consumer():
        local = collections.Counter()
        while True:
            try:
                local[q.get()] += 1
            except QueueClosed:
                break
        with lock:
            consumed.update(local)

    cons = [threading.Thread(target=consumer) for _ in range(3)]
    prods = [threading.Thread(target=producer, args=(k,)) for k in range(3)]
    for t in cons + prods:
        t.start()
    for t in prods:
        t.join(30)
    q.close()
    for t in cons:
        t.join(30)
    assert sum(produced.values()) == 300
    assert consumed == produced
    assert broker.max_depth(q.channel_id) <= 16


def test_queue_handle_is_picklable(broker):
    q = broker.create_queue()
    q2 = pickle.loads(pickle.dumps(q))
    q.put(b"across")
    assert q2.get() == b"across"


def test_queue_shared_with_another_process(broker):
    q = broker.create_queue()
    code = (
        "import pickle,sys; q = pickle.loads(sys.stdin.buffer.read()); "
        "[q.put(b'p%d' % i) for i in range(50)]"
    )
    subprocess.run([sys.executable, "-c", code], input=pickle.dumps(q), check=True, timeout=60)
    assert sorted(q.get() for _ in range(50)) == sorted(b"p%d" % i for i in range(50))


def test_unknown_queue_is_an_error(broker):
    with pytest.raises(ChannelError):
        DistQueue(broker.address, 999).put(b"x")


def test_broker_stop_releases_blocked_clients(broker):
    q = broker.create_queue()
    errors = []

    def getter():
        try:
            q.get()
        except (QueueClosed, ChannelError) as exc:
            errors.append(exc)

    t = threading.Thread(target=getter)
    t.start()
    time.sleep(0.1)
    broker.stop()
    t.join(5)
    assert not t.is_alive() and errors


# ------------------------------------------------------------------- pipe


def test_pipe_send_order():
    a, b = Pipe()
    for x in (b"1", b"2", b"3"):
        a.send(x)
    assert [b.recv(), b.recv(), b.recv()] == [b"1", b"2", b"3"]
    a.close()
    b.close()


def test_pipe_10000_random_payloads():
    rng = random.Random(1234)
    payloads = [rng.randbytes(rng.randint(0, 300)) for _ in range(10_000)]
    a, b = Pipe()
    t = threading.Thread(target=lambda: [a.send(p) for p in payloads])
    t.start()
    got = [b.recv() for _ in range(len(payloads))]
    t.join(30)
    assert got == payloads
    assert a.sent == b.received == 10_000
    a.close()
    b.close()


def test_pipe_bidirectional_interleaved():
    a, b = Pipe()
    rng = random.Random(5)
    sent_ab, sent_ba, got_ab, got_ba = [], [], [], []
    for i in range(500):
        if rng.random() < 0.5:
            a.send(b"a%d" % i)
            sent_ab.append(b"a%d" % i)
        else:
            b.send(b"b%d" % i)
            sent_ba.append(b"b%d" % i)
        if rng.random() < 0.3 and len(got_ab) < len(sent_ab):
            got_ab.append(b.recv())
        if rng.random() < 0.3 and len(got_ba) < len(sent_ba):
            got_ba.append(a.recv())
    while len(got_ab) < len(sent_ab):
        got_ab.append(b.recv())
    while len(got_ba) < len(sent_ba):
        got_ba.append(a.recv())
    assert got_ab == sent_ab and got_ba == sent_ba
    a.close()
    b.close()


def test_recv_after_clean_close_drains_then_closed():
    a, b = Pipe()
    a.send(b"x")
    a.close()
    assert b.recv() == b"x"
    with pytest.raises(PipeClosed):
        b.recv()
    with pytest.raises(PipeClosed):
        b.recv()


def test_send_after_peer_closed_is_broken():
    a, b = Pipe()
    a.close()
    time.sleep(0.05)
    with pytest.raises(PipeBroken):
        b.send(b"late")


def test_abrupt_loss_is_broken():
    a, b = Pipe()
    a._conn.close()  # simulate a crashed peer: no Shutdown frame
    with pytest.raises(PipeBroken):
        b.recv()


def test_closed_end_rejects_use_and_double_close_is_fine():
    a, b = Pipe()
    a.close()
    a.close()
    with pytest.raises(PipeClosed):
        a.send(b"x")
    b.close()


def test_poll():
    a, b = Pipe()
    assert not b.poll(0.05)
    a.send(b"z")
    assert b.poll(2)
    assert b.recv() == b"z"
    a.close()
    b.close()


def test_listener_connect_pipe():
    lst = PipeListener()
    out = []
    t = threading.Thread(target=lambda: out.append(lst.accept(timeout=5)))
    t.start()
    a = connect_pipe(lst.address)
    t.join(5)
    b = out[0]
    a.send(b"hello")
    assert b.recv() == b"hello"
    b.send(b"back")
    assert a.recv() == b"back"
    for e in (a, b):
        e.close()
    lst.close()
