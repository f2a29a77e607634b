import threading

import pytest

from taskforge.core import (
    DuplicateName,
    FunctionRegistry,
    TaskIdCounter,
    TaskSpec,
    UnknownFunction,
    next_task_id,
)


def _eval(b):
    return b


def _double(b):
    return b + b


def test_registration_is_sequential():
    reg = FunctionRegistry()
    assert reg.register("eval", _eval) == 0
    assert reg.register("double", _double) == 1
    with pytest.raises(DuplicateName):
        reg.register("eval", _eval)


def test_lookup():
    reg = FunctionRegistry()
    reg.register("eval", _eval)
    reg.register("double", _double)
    assert reg.lookup(0) is _eval
    assert reg.lookup("double") is _double
    with pytest.raises(UnknownFunction):
        reg.lookup(7)
    with pytest.raises(UnknownFunction):
        reg.lookup("nope")
    f = lambda b: b  # noqa: E731
    assert reg.lookup(reg.register("f", f)) is f


def test_same_sequence_same_ids():
    names = ["a", "b", "c", "d"]
    r1, r2 = FunctionRegistry(), FunctionRegistry()
    for n in names:
        r1.register(n, _eval)
    for n in names:
        r2.register(n, _double)
    assert r1.names() == r2.names()


def test_task_ids_start_at_one():
    c = TaskIdCounter()
    assert [next_task_id(c) for _ in range(3)] == [1, 2, 3]
    assert list(c.take(2)) == [4, 5]


def test_task_ids_unique_under_concurrency():
    c = TaskIdCounter()
    out = []
    lock = threading.Lock()

    def grab():
        mine = [c.next() for _ in range(100)]
        with lock:
            out.extend(mine)

    threads = [threading.Thread(target=grab) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(out) == 1000
    assert len(set(out)) == 1000


def test_task_spec_next_attempt():
    s = TaskSpec(5, 1, b"x")
    assert s.next_attempt() == TaskSpec(5, 1, b"x", 1)
