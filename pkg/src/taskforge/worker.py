"""Worker side of a pool: connect, say Hello, run task batches, heartbeat.

The same loop runs inside a spawned OS process (local backend, via the
``worker`` CLI subcommand) and inside a thread (simulated backend).
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Optional, Tuple

from .core import REGISTRY, FunctionRegistry, TaskResult, UnknownFunction
from .wire import (
    Connection,
    ControlKind,
    Control,
    Heartbeat,
    Result,
    Task,
    WireError,
    format_address,
    hello,
    parse_address,
)

log = logging.getLogger(__name__)

ENV_MASTER_ADDR = "TASKFORGE_MASTER_ADDR"
ENV_WORKER_ID = "TASKFORGE_WORKER_ID"
ENV_HEARTBEAT_MS = "TASKFORGE_HEARTBEAT_MS"
ENV_FAULT = "TASKFORGE_FAULT"

EXIT_OK = 0
EXIT_CONNECT = 2
EXIT_PROTOCOL = 3
EXIT_CRASH = 70


class WorkerCrash(BaseException):
    """Raised by a task body to make its worker die abruptly.

    Derives from BaseException so ordinary ``except Exception`` in task
    code does not swallow it.
    """


@dataclass(frozen=True)
class Fault:
    """Scripted misbehaviour: ``fail`` drops the connection, ``hang`` goes silent.

    Either fires when the worker is handed its ``after_tasks + 1``-th task.
    """

    kind: str
    after_tasks: int

    def __post_init__(self):
        if self.kind not in ("fail", "hang"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.after_tasks < 0:
            raise ValueError("after_tasks must be >= 0")

    def encode(self) -> str:
        return f"{self.kind}:{self.after_tasks}"

    @classmethod
    def decode(cls, text: str) -> "Fault":
        kind, _, n = text.partition(":")
        return cls(kind, int(n))


class WorkerRuntime:
    def __init__(
        self,
        address: Tuple[str, int],
        worker_id: int,
        *,
        registry: FunctionRegistry = REGISTRY,
        heartbeat_interval: float = 1.0,
        fault: Optional[Fault] = None,
        connect_timeout: float = 10.0,
    ) -> None:
        self.address = address
        self.worker_id = worker_id
        self.registry = registry
        self.heartbeat_interval = heartbeat_interval
        self.fault = fault
        self.connect_timeout = connect_timeout
        self.tasks_done = 0
        self.exit_detail = ""
        self.exit_code: Optional[int] = None
        self._conn: Optional[Connection] = None
        self._stop = threading.Event()
        self._silent = threading.Event()

    @classmethod
    def from_env(cls, env=os.environ, **kw) -> "WorkerRuntime":
        """Build from the bootstrap env vars; KeyError/ValueError if missing."""
        address = parse_address(env[ENV_MASTER_ADDR])
        worker_id = int(env[ENV_WORKER_ID])
        if ENV_HEARTBEAT_MS in env:
            kw.setdefault("heartbeat_interval", int(env[ENV_HEARTBEAT_MS]) / 1000.0)
        if env.get(ENV_FAULT):
            kw.setdefault("fault", Fault.decode(env[ENV_FAULT]))
        return cls(address, worker_id, **kw)

    def kill(self) -> None:
        """Stop abruptly from another thread (used for simulated workers)."""
        self._stop.set()
        conn = self._conn
        if conn is not None:
            conn.close()

    def _connect(self) -> Connection:
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                return Connection.connect(self.address, timeout=self.connect_timeout)
            except OSError:
                if time.monotonic() >= deadline or self._stop.is_set():
                    raise
                time.sleep(0.05)

    def _heartbeat_loop(self, conn: Connection) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            if self._silent.is_set():
                return
            try:
                conn.send(Heartbeat(self.worker_id, int(time.monotonic() * 1000)))
            except OSError:
                return

    def run(self) -> int:
        try:
            conn = self._connect()
        except OSError as exc:
            self.exit_detail = f"cannot reach master {format_address(self.address)}: {exc}"
            self.exit_code = EXIT_CONNECT
            return EXIT_CONNECT
        self._conn = conn
        if self._stop.is_set():
            conn.close()
            self.exit_code = EXIT_CRASH
            return EXIT_CRASH
        try:
            self.exit_code = self._run_connected(conn)
        finally:
            self._stop.set()
            conn.close()
        return self.exit_code

    def _run_connected(self, conn: Connection) -> int:
        hb = threading.Thread(target=self._heartbeat_loop, args=(conn,), daemon=True)
        try:
            conn.send(hello(self.worker_id))
            hb.start()
            return self._serve(conn)
        except WireError as exc:
            self.exit_detail = f"protocol error: {exc}"
            return EXIT_PROTOCOL
        except OSError as exc:
            if self._stop.is_set():
                self.exit_detail = "killed"
                return EXIT_CRASH
            self.exit_detail = f"connection lost: {exc}"
            return EXIT_CONNECT

    def _serve(self, conn: Connection) -> int:
        while True:
            msg = conn.recv()
            if msg is None:
                if self._stop.is_set():
                    self.exit_detail = "killed"
                    return EXIT_CRASH
                self.exit_detail = "master closed the connection"
                return EXIT_CONNECT
            if isinstance(msg, Task):
                out = []
                for spec in msg.specs:
                    if self.fault is not None and self.tasks_done >= self.fault.after_tasks:
                        return self._misbehave()
                    try:
                        out.append(self._execute(spec))
                    except WorkerCrash as exc:
                        self.exit_detail = f"worker-crash: {exc}"
                        return EXIT_CRASH
                    self.tasks_done += 1
                conn.send(Result(tuple(out)))
            elif isinstance(msg, Control) and msg.kind == ControlKind.SHUTDOWN:
                self.exit_detail = "shutdown"
                return EXIT_OK
            else:
                raise WireError(f"unexpected message from master: {type(msg).__name__}")

    def _execute(self, spec) -> TaskResult:
        try:
            body = self.registry.lookup(spec.fn_id)
        except UnknownFunction:
            return TaskResult(spec.id, self.worker_id, b"", f"UnknownFunction: {spec.fn_id}")
        try:
            out = body(spec.args)
        except Exception as exc:
            return TaskResult(spec.id, self.worker_id, b"", f"{type(exc).__name__}: {exc}")
        if out is None:
            out = b""
        return TaskResult(spec.id, self.worker_id, bytes(out))

    def _misbehave(self) -> int:
        assert self.fault is not None
        if self.fault.kind == "hang":
            self._silent.set()
            self._stop.wait()
            self.exit_detail = "killed while hung"
        else:
            self.exit_detail = "scripted-failure"
        return EXIT_CRASH


def run_worker_from_env(env=os.environ) -> int:
    try:
        runtime = WorkerRuntime.from_env(env)
    except (KeyError, ValueError) as exc:
        log.error("worker bootstrap needs %s and %s: %s", ENV_MASTER_ADDR, ENV_WORKER_ID, exc)
        return EXIT_CONNECT
    code = runtime.run()
    if code not in (EXIT_OK, EXIT_CRASH):
        log.error("worker %d: %s", runtime.worker_id, runtime.exit_detail)
    return code


__all__ = [
    "ENV_FAULT",
    "ENV_HEARTBEAT_MS",
    "ENV_MASTER_ADDR",
    "ENV_WORKER_ID",
    "Fault",
    "WorkerCrash",
    "WorkerRuntime",
    "run_worker_from_env",
]
