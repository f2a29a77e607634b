import os
import socket
import subprocess
import sys
import textwrap
import threading

import pytest

from taskforge.codec import pack_int, unpack_int
from taskforge.core import REGISTRY, FunctionRegistry, TaskSpec
from taskforge.pool import Pool, PoolConfig
from taskforge.wire import SHUTDOWN, Connection, Control, ControlKind, Data, Heartbeat, Result, Task
from taskforge.worker import EXIT_CONNECT, EXIT_CRASH, EXIT_OK, EXIT_PROTOCOL, Fault, WorkerRuntime

SRC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")


def worker_env(addr, wid=1, **extra):
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (SRC, env.get("PYTHONPATH")) if p)
    if addr is not None:
        env["TASKFORGE_MASTER_ADDR"] = addr
        env["TASKFORGE_WORKER_ID"] = str(wid)
    env.update(extra)
    return env


def spawn_worker(env, *args):
    return subprocess.Popen([sys.executable, "-m", "taskforge", "worker", *args], env=env,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)


@pytest.fixture
def listener():
    s = socket.create_server(("127.0.0.1", 0))
    s.settimeout(20)
    yield s, "%s:%d" % s.getsockname()[:2]
    s.close()


def accept(s):
    c, _ = s.accept()
    c.settimeout(20)
    conn = Connection(c)
    hello = conn.recv()
    assert isinstance(hello, Control) and hello.kind == ControlKind.HELLO
    return conn, hello.worker


def test_missing_env_exits_2_with_diagnostic():
    p = spawn_worker(worker_env(None))
    _, err = p.communicate(timeout=30)
    assert p.returncode == EXIT_CONNECT
    assert b"TASKFORGE_MASTER_ADDR" in err


def test_shutdown_with_empty_queue_exits_0(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr, wid=9))
    conn, wid = accept(s)
    assert wid == 9
    conn.send(SHUTDOWN)
    assert p.wait(timeout=30) == EXIT_OK
    conn.close()


def test_processes_tasks_then_exits_0(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr))
    conn, _ = accept(s)
    fid = REGISTRY.resolve("double")
    conn.send(Task((TaskSpec(1, fid, pack_int(5)), TaskSpec(2, fid, pack_int(6)))))
    msg = conn.recv()
    while isinstance(msg, Heartbeat):
        msg = conn.recv()
    assert isinstance(msg, Result)
    assert [(r.id, unpack_int(r.payload)) for r in msg.results] == [(1, 10), (2, 12)]
    conn.send(SHUTDOWN)
    assert p.wait(timeout=30) == EXIT_OK
    conn.close()


def test_protocol_error_exits_3(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr))
    conn, _ = accept(s)
    conn.send_raw(b"\x00\x00\x00\x02\x09\x01")  # unsupported version
    assert p.wait(timeout=30) == EXIT_PROTOCOL
    conn.close()


def test_unexpected_message_exits_3(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr))
    conn, _ = accept(s)
    conn.send(Data(1, 0, b"?"))
    assert p.wait(timeout=30) == EXIT_PROTOCOL
    conn.close()


def test_master_vanishing_exits_2(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr))
    conn, _ = accept(s)
    conn.close()
    assert p.wait(timeout=30) == EXIT_CONNECT


def test_heartbeats_are_sent(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr, TASKFORGE_HEARTBEAT_MS="50"))
    conn, _ = accept(s)
    beats = [conn.recv() for _ in range(3)]
    assert all(isinstance(b, Heartbeat) and b.worker == 1 for b in beats)
    assert beats[0].monotonic_ms <= beats[1].monotonic_ms <= beats[2].monotonic_ms
    conn.send(SHUTDOWN)
    p.wait(timeout=30)
    conn.close()


def test_scripted_fault_via_env(listener):
    s, addr = listener
    p = spawn_worker(worker_env(addr, TASKFORGE_FAULT="fail:1"))
    conn, _ = accept(s)
    fid = REGISTRY.resolve("double")
    conn.send(Task((TaskSpec(1, fid, pack_int(1)),)))
    msg = conn.recv()
    while isinstance(msg, Heartbeat):
        msg = conn.recv()
    assert isinstance(msg, Result)
    conn.send(Task((TaskSpec(2, fid, pack_int(2)),)))
    assert p.wait(timeout=30) == EXIT_CRASH
    conn.close()


def test_task_error_and_unknown_function_are_results():
    reg = FunctionRegistry()
    reg.register("boom", lambda b: 1 / 0)
    s = socket.create_server(("127.0.0.1", 0))
    rt = WorkerRuntime(s.getsockname()[:2], 4, registry=reg)
    t = threading.Thread(target=rt.run)
    t.start()
    c, _ = s.accept()
    conn = Connection(c)
    conn.recv()  # hello
    conn.send(Task((TaskSpec(1, 0, b""), TaskSpec(2, 99, b""))))
    msg = conn.recv()
    while isinstance(msg, Heartbeat):
        msg = conn.recv()
    errors = [r.error for r in msg.results]
    assert errors[0].startswith("ZeroDivisionError") and errors[1].startswith("UnknownFunction")
    conn.send(SHUTDOWN)
    t.join(10)
    assert rt.exit_code == EXIT_OK
    conn.close()
    s.close()


def test_fault_encoding_round_trip():
    for f in (Fault("fail", 0), Fault("hang", 12)):
        assert Fault.decode(f.encode()) == f
    with pytest.raises(ValueError):
        Fault.decode("explode:1")


def test_extra_import_module_registers_functions(tmp_path, monkeypatch, backend):
    """Master and workers import the same module, so the ids agree."""
    mod = tmp_path / "tf_extra_tasks.py"
    mod.write_text(textwrap.dedent("""
        from taskforge.codec import pack_int, unpack_int
        from taskforge.core import REGISTRY
        if "triple" not in REGISTRY:
            REGISTRY.register("triple", lambda b: pack_int(3 * unpack_int(b)))
    """))
    monkeypatch.syspath_prepend(str(tmp_path))
    monkeypatch.setenv("PYTHONPATH", os.pathsep.join(p for p in (str(tmp_path), os.environ.get("PYTHONPATH")) if p))
    import tf_extra_tasks  # noqa: F401

    with Pool(PoolConfig(workers=2, backend=backend, imports=("tf_extra_tasks",))) as pool:
        assert pool.map("triple", [pack_int(4)], decode=unpack_int) == [12]
