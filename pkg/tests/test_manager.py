import socket
import threading

import pytest

from taskforge.channels import ConnectionLost
from taskforge.manager import (
    BindFailed,
    KeyNotFound,
    Manager,
    ManagerClient,
    MethodError,
    UnknownMethod,
    UnknownObject,
    UnknownType,
)


class Counter:
    def __init__(self, init: bytes):
        self.n = int(init or b"0")

    def increment(self, _: bytes) -> None:
        self.n += 1

    def value(self, _: bytes) -> bytes:
        return str(self.n).encode()

    def fail(self, _: bytes) -> bytes:
        raise RuntimeError("nope")


class Walker:
    """Stateful toy environment: position changes depend on history."""

    def __init__(self, init: bytes):
        self.pos = 0
        self.trace = []

    def step(self, arg: bytes) -> bytes:
        delta = int(arg)
        self.pos = self.pos * 2 + delta if self.pos < 1000 else self.pos - delta
        self.trace.append(self.pos)
        return str(self.pos).encode()

    def reset(self, _: bytes) -> bytes:
        self.pos = 0
        return b"0"


@pytest.fixture
def manager():
    m = Manager()
    m.register("Counter", Counter)
    m.register("Walker", Walker)
    m.start()
    yield m
    m.stop()


@pytest.fixture
def client(manager):
    c = ManagerClient(manager.address)
    yield c
    c.close()


def test_start_on_occupied_port_fails(manager):
    with pytest.raises(BindFailed):
        Manager(manager.address).start()


def test_fresh_store_is_empty(client):
    with pytest.raises(KeyNotFound):
        client.kv_get("k")


def test_put_versions_and_get(client):
    assert client.kv_put("k", b"v") == 1
    assert client.kv_get("k") == (b"v", 1)
    assert client.kv_put("k", b"v2") == 2
    assert client.kv_get("k") == (b"v2", 2)
    assert client.kv_put("other", b"") == 1


def test_concurrent_puts_serialize(manager):
    clients = [ManagerClient(manager.address) for _ in range(4)]

    def writer(k, c):
        for i in range(25):
            c.kv_put("shared", f"{k}-{i}".encode())

    ts = [threading.Thread(target=writer, args=(k, c)) for k, c in enumerate(clients)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)
    value, version = clients[0].kv_get("shared")
    assert version == 100
    writes = manager.write_log("shared")
    assert [v for _, v, _ in writes] == list(range(1, 101))
    assert value == writes[-1][2]
    for c in clients:
        c.close()


def test_versions_never_go_backwards_per_reader(manager):
    stop = threading.Event()
    bad = []

    def writer():
        c = ManagerClient(manager.address)
        for i in range(200):
            c.kv_put("k", str(i).encode())
        c.close()

    def reader():
        c = ManagerClient(manager.address)
        last = 0
        while not stop.is_set():
            try:
                _, v = c.kv_get("k")
            except KeyNotFound:
                continue
            if v < last:
                bad.append((last, v))
            last = v
        c.close()

    readers = [threading.Thread(target=reader) for _ in range(2)]
    writers = [threading.Thread(target=writer) for _ in range(2)]
    for t in readers + writers:
        t.start()
    for t in writers:
        t.join(30)
    stop.set()
    for t in readers:
        t.join(30)
    assert bad == []
    assert ManagerClient(manager.address).kv_get("k")[1] == 400


def test_read_your_writes(client):
    for i in range(20):
        v = client.kv_put("mine", str(i).encode())
        assert client.kv_get("mine") == (str(i).encode(), v)


def test_proxy_create_and_ids(client):
    p = client.create("Counter")
    assert p.object_id == 1 and p.type_name == "Counter"
    more = [client.create("Counter") for _ in range(9)]
    assert [q.object_id for q in more] == list(range(2, 11))


def test_unknown_type(client):
    with pytest.raises(UnknownType):
        client.create("Nope")


def test_stateful_calls(client):
    p = client.create("Counter", b"0")
    for _ in range(3):
        p.increment()
    assert p.value() == b"3"
    assert p.call("value") == b"3"


def test_release_then_call_is_unknown_object(client):
    p = client.create("Counter")
    p.release()
    with pytest.raises(UnknownObject):
        p.value()
    with pytest.raises(UnknownObject):
        p.release()


def test_unknown_method_and_method_error(client):
    p = client.create("Counter")
    with pytest.raises(UnknownMethod):
        p.call("missing")
    with pytest.raises(UnknownMethod):
        p.call("__init__")
    with pytest.raises(MethodError, match="RuntimeError: nope"):
        p.fail()
    assert p.value() == b"0"


def test_interleaved_clients_match_arrival_log_replay(manager):
    owner = ManagerClient(manager.address)
    proxy = owner.create("Walker")
    oid = proxy.object_id
    replies = {}

    def stepper(k):
        c = ManagerClient(manager.address)
        out = []
        for i in range(50):
            out.append(c.call(oid, "step", str(k * 10 + i % 7).encode()))
        replies[k] = out
        c.close()

    ts = [threading.Thread(target=stepper, args=(k,)) for k in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)

    log = manager.arrival_log(oid)
    assert len(log) == 200
    oracle = Walker(b"")
    replayed = [getattr(oracle, a.method)(a.args) for a in log]
    final = proxy.call("step", b"0")
    assert final == oracle.step(b"0")
    # each client's replies form a subsequence of the replayed replies
    for k, out in replies.items():
        mine = [r for a, r in zip(log, replayed) if int(a.args) // 10 == k]
        assert out == mine
    owner.close()


def test_calls_on_distinct_objects_are_independent(client):
    a, b = client.create("Counter"), client.create("Counter")
    a.increment()
    a.increment()
    b.increment()
    assert (a.value(), b.value()) == (b"2", b"1")


def test_client_after_manager_stops_loses_connection():
    m = Manager().start()
    c = ManagerClient(m.address)
    c.kv_put("k", b"v")
    m.stop()
    with pytest.raises(ConnectionLost):
        c.kv_get("k")


def test_client_to_dead_address():
    s = socket.create_server(("127.0.0.1", 0))
    addr = s.getsockname()[:2]
    s.close()
    with pytest.raises(ConnectionLost):
        ManagerClient(addr).kv_get("k")
