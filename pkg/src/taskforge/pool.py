"""Worker pool with a task queue, a pending table and failure recovery.

One scheduler thread owns all mutable state: the task queue, the pending
table (task id -> worker executing it), worker records and result routing.
Callers hand it work through an inbox and block on waiters.

Recovery protocol: a task taken off the queue enters the pending table;
its result removes the entry. When a worker dies (connection drop, backend
poll shows the job ended, or heartbeats stop) every task pending on it goes
back to the *head* of the queue with ``attempt + 1`` and a replacement
worker with a fresh id is started. A task whose workers died
``max_attempts`` times is reported as :class:`TaskPoisoned`. Errors raised
by the task body itself are results, not failures, and are never retried.

Tasks must tolerate running more than once: a worker may die after
finishing a task but before its result reaches the master. The first
result to arrive wins and later duplicates are dropped.
"""

from __future__ import annotations

import collections
import concurrent.futures
import logging
import os
import selectors
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

from .backend import Backend, JobHandle, JobSpec, SimScript, SpawnFailed, make_backend, worker_command
from .core import (
    REGISTRY,
    FunctionRegistry,
    TaskforgeError,
    TaskIdCounter,
    TaskResult,
    TaskSpec,
)
from .wire import (
    SHUTDOWN,
    Connection,
    Control,
    ControlKind,
    Heartbeat,
    Result,
    Task,
    WireError,
    encode_frame,
    format_address,
)
from .worker import ENV_HEARTBEAT_MS, ENV_MASTER_ADDR, ENV_WORKER_ID

log = logging.getLogger(__name__)

ENV_STATS = "TASKFORGE_STATS"


class PoolError(TaskforgeError):
    pass


class PoolShutDown(PoolError):
    pass


class PoolBroken(PoolError):
    """The scheduler cannot make progress (e.g. workers never come up)."""


class TaskPoisoned(PoolError):
    def __init__(self, index: int, detail: str) -> None:
        super().__init__(f"task {index} poisoned: {detail}")
        self.index = index
        self.detail = detail


class TaskError(PoolError):
    """The task body raised; ``message`` is the remote error text."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"task {index} failed: {message}")
        self.index = index
        self.message = message


@dataclass
class PoolConfig:
    workers: int = 4
    backend: Union[str, Backend] = "local"
    heartbeat_interval: float = 1.0
    heartbeat_timeout: float = 3.0
    max_attempts: int = 3
    batch_size: int = 1
    host: str = "127.0.0.1"
    imports: Tuple[str, ...] = ()
    script: Optional[SimScript] = None
    registry: FunctionRegistry = field(default=REGISTRY, repr=False)
    poll_interval: float = 0.05
    startup_timeout: float = 60.0
    retire_grace: float = 2.0
    check_invariants: bool = False

    def validate(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.heartbeat_interval <= 0 or self.heartbeat_timeout <= self.heartbeat_interval:
            raise ValueError("need 0 < heartbeat_interval < heartbeat_timeout")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PoolStats:
    submitted: int = 0
    dispatched: int = 0
    completed: int = 0
    failed_attempts: int = 0
    resubmissions: int = 0
    active_workers: int = 0
    task_errors: int = 0
    poisoned: int = 0
    cancelled: int = 0
    duplicates: int = 0
    workers_started: int = 0
    workers_failed: int = 0
    queued: int = 0
    pending: int = 0

    def format(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class PendingEntry:
    worker: int
    spec: TaskSpec
    dispatched_at: float


# worker states
STARTING = "starting"  # job submitted, no Hello yet
IDLE = "idle"
BUSY = "busy"
RETIRING = "retiring"  # busy, gets Shutdown once its batch is done
CLOSING = "closing"  # Shutdown sent, waiting for exit
DEAD = "dead"

_ALIVE = (STARTING, IDLE, BUSY)


class _Worker:
    __slots__ = ("id", "handle", "conn", "state", "inflight", "last_seen", "since")

    def __init__(self, wid: int, handle: JobHandle, now: float) -> None:
        self.id = wid
        self.handle = handle
        self.conn: Optional[Connection] = None
        self.state = STARTING
        self.inflight: Dict[int, None] = {}  # ordered set of task ids
        self.last_seen = now
        self.since = now


class _Waiter:
    """Collects results for one map call (or one async task)."""

    def __init__(self, n: int) -> None:
        self.results: List[Optional[TaskResult]] = [None] * n
        self.errors: Dict[int, Exception] = {}
        self.remaining = n
        self.done = threading.Event()
        if n == 0:
            self.done.set()

    def deliver(self, index: int, result: TaskResult) -> None:
        self.results[index] = result
        self._tick()

    def fail(self, index: int, exc: Exception) -> None:
        self.errors[index] = exc
        self._tick()

    def _tick(self) -> None:
        self.remaining -= 1
        if self.remaining == 0:
            self.done.set()


class _FutureWaiter:
    def __init__(self, future: concurrent.futures.Future) -> None:
        self.future = future

    def deliver(self, index: int, result: TaskResult) -> None:
        self.future.set_result(result)

    def fail(self, index: int, exc: Exception) -> None:
        self.future.set_exception(exc)


class _Slot:
    __slots__ = ("waiter", "index", "chunk")

    def __init__(self, waiter, index: int, chunk: int) -> None:
        self.waiter = waiter
        self.index = index
        self.chunk = chunk


class Pool:
    """A pool of job-backed workers.

    >>> with Pool(PoolConfig(workers=4, backend="sim")) as pool:
    ...     pool.map("double", [b"\\x01"])
    """

    def __init__(self, config: Optional[PoolConfig] = None, **overrides: Any) -> None:
        cfg = config or PoolConfig()
        for k, v in overrides.items():
            setattr(cfg, k, v)
        cfg.validate()
        self.config = cfg
        self.registry = cfg.registry
        self.backend = make_backend(cfg.backend, cfg.script)
        self._owns_backend = not isinstance(cfg.backend, Backend)

        self._ids = TaskIdCounter()
        self._next_worker = 1
        self._queue: Deque[TaskSpec] = collections.deque()
        self._pending: Dict[int, PendingEntry] = {}
        self._slots: Dict[int, _Slot] = {}
        self._workers: Dict[int, _Worker] = {}
        self._idle: Deque[_Worker] = collections.deque()
        self._reaping: List[Tuple[JobHandle, float]] = []
        self._handles: List[JobHandle] = []
        self._stats = PoolStats()
        self._target = cfg.workers
        self._startup_failures = 0
        self._closing = False
        self._final: Optional[PoolStats] = None
        self._broken: Optional[Exception] = None
        self.invariant_violations: List[str] = []

        self._inbox: Deque[Callable[[], None]] = collections.deque()
        self._sel = selectors.DefaultSelector()
        self._listener = socket.create_server((cfg.host, 0), backlog=1024)
        self._listener.setblocking(False)
        self.address = self._listener.getsockname()[:2]
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._sel.register(self._listener, selectors.EVENT_READ, "listener")
        self._sel.register(self._wake_r, selectors.EVENT_READ, "wakeup")

        self._shutdown_lock = threading.Lock()
        self._done = concurrent.futures.Future()
        try:
            for _ in range(cfg.workers):
                self._spawn()
        except SpawnFailed:
            self._abort_startup()
            raise
        self._thread = threading.Thread(target=self._run, name="taskforge-scheduler", daemon=True)
        self._thread.start()

    # ------------------------------------------------------------------ public

    def __enter__(self) -> "Pool":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def map_results(
        self,
        fn: Union[int, str],
        inputs: Sequence[bytes],
        chunksize: Optional[int] = None,
        timeout: Optional[float] = None,
    ) -> List[TaskResult]:
        """Run ``fn`` on every input; return the raw results in input order.

        Raises :class:`TaskPoisoned` (lowest index first) if any input kept
        killing its workers. Task errors come back as results with ``error``.
        """
        fid = self.registry.resolve(fn)
        chunk = chunksize or self.config.batch_size
        waiter = _Waiter(len(inputs))
        if inputs:
            ids = self._ids.take(len(inputs))
            specs = [TaskSpec(tid, fid, bytes(arg)) for tid, arg in zip(ids, inputs)]
            slots = [_Slot(waiter, i, chunk) for i in range(len(specs))]
            self._call(lambda: self._enqueue(specs, slots))
        if not waiter.done.wait(timeout):
            raise TimeoutError(f"map did not finish within {timeout}s")
        if waiter.errors:
            raise waiter.errors[min(waiter.errors)]
        return waiter.results  # type: ignore[return-value]

    def map(
        self,
        fn: Union[int, str],
        inputs: Sequence[Any],
        chunksize: Optional[int] = None,
        timeout: Optional[float] = None,
        encode: Optional[Callable[[Any], bytes]] = None,
        decode: Optional[Callable[[bytes], Any]] = None,
    ) -> List[Any]:
        """Like :meth:`map_results` but returns payloads and raises on task errors."""
        payloads = [encode(x) for x in inputs] if encode else inputs
        results = self.map_results(fn, payloads, chunksize, timeout)
        out = []
        for i, r in enumerate(results):
            if r.error is not None:
                raise TaskError(i, r.error)
            out.append(decode(r.payload) if decode else r.payload)
        return out

    def apply_async(self, fn: Union[int, str], args: bytes = b"") -> concurrent.futures.Future:
        """Submit one task; the future resolves to its :class:`TaskResult`."""
        fid = self.registry.resolve(fn)
        fut: concurrent.futures.Future = concurrent.futures.Future()
        spec = TaskSpec(self._ids.next(), fid, bytes(args))
        slot = _Slot(_FutureWaiter(fut), 0, self.config.batch_size)
        self._call(lambda: self._enqueue([spec], [slot]))
        return fut

    def scale_to(self, target: int) -> None:
        if target < 1:
            raise ValueError("target must be >= 1")
        self._sync(lambda: self._scale(target))

    def stats(self) -> PoolStats:
        if self._final is not None:
            return self._final
        try:
            return self._sync(self._snapshot)
        except PoolShutDown:
            return self._done.result()

    def wait_ready(self, n: Optional[int] = None, timeout: float = 60.0) -> None:
        """Block until ``n`` (default: all) workers have said Hello."""
        n = self._target if n is None else n
        deadline = time.monotonic() + timeout
        while self.stats().active_workers < n:
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {self.stats().active_workers}/{n} workers ready")
            time.sleep(0.01)

    def live_jobs(self) -> List[JobHandle]:
        """Non-terminal jobs this pool created."""
        mine = {h.job_id for h in self._handles}
        return [h for h in self.backend.list_jobs() if h.job_id in mine]

    def shutdown(self, timeout: float = 30.0) -> PoolStats:
        with self._shutdown_lock:
            if self._final is None:
                if self._thread.is_alive():
                    self._post(self._begin_shutdown)
                    stats = self._done.result(timeout)
                else:
                    stats = self._done.result(0)
                self._final = stats
                if os.environ.get(ENV_STATS) == "1":
                    sys.stderr.write(stats.format())
            return self._final

    close = shutdown

    # --------------------------------------------------------- caller plumbing

    def _call(self, fn: Callable[[], None]) -> None:
        if self._closing or self._done.done():
            raise PoolShutDown("pool is shut down")
        if self._broken is not None:
            raise PoolBroken(str(self._broken))
        self._post(fn)

    def _post(self, fn: Callable[[], None]) -> None:
        self._inbox.append(fn)
        try:
            self._wake_w.send(b"\0")
        except (BlockingIOError, OSError):
            pass

    def _sync(self, fn: Callable[[], Any]) -> Any:
        fut: concurrent.futures.Future = concurrent.futures.Future()

        def run() -> None:
            try:
                fut.set_result(fn())
            except Exception as exc:
                fut.set_exception(exc)

        self._call(run)
        return fut.result()

    # ------------------------------------------------------- scheduler thread

    def _run(self) -> None:
        cfg = self.config
        next_tick = time.monotonic()
        try:
            while True:
                timeout = max(0.0, next_tick - time.monotonic())
                for key, _ in self._sel.select(timeout):
                    tag = key.data
                    if tag == "listener":
                        self._accept()
                    elif tag == "wakeup":
                        try:
                            while self._wake_r.recv(4096):
                                pass
                        except BlockingIOError:
                            pass
                    elif isinstance(tag, _Worker):
                        self._on_readable(tag)
                    else:
                        self._on_handshake(key.fileobj, tag)
                while self._inbox:
                    self._inbox.popleft()()
                now = time.monotonic()
                if now >= next_tick:
                    self._tick(now)
                    next_tick = now + cfg.poll_interval
                self._dispatch()
                if cfg.check_invariants:
                    self._check_invariants()
                if self._closing and self._finished_closing():
                    break
        except Exception as exc:  # scheduler must never die silently
            log.exception("scheduler crashed")
            self._broken = exc
            self._fail_everything(PoolBroken(f"scheduler crashed: {exc!r}"))
        self._teardown()

    def _accept(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except BlockingIOError:
                return
            sock.setblocking(True)
            conn = Connection(sock)
            self._sel.register(sock, selectors.EVENT_READ, conn)

    def _on_handshake(self, sock, conn: Connection) -> None:
        """First frame of a fresh connection must be Hello(worker id)."""
        try:
            msgs = conn.read_available()
        except (OSError, WireError):
            msgs = None
        if msgs == []:
            return  # Hello not complete yet
        w = None
        if msgs:
            first = msgs[0]
            if isinstance(first, Control) and first.kind == ControlKind.HELLO:
                w = self._workers.get(first.worker)
        self._sel.unregister(sock)
        if w is None or w.state != STARTING:
            conn.close()
            return
        w.conn = conn
        w.state = IDLE
        w.last_seen = time.monotonic()
        self._startup_failures = 0
        self._stats.active_workers += 1
        self._idle.append(w)
        self._sel.register(sock, selectors.EVENT_READ, w)
        if len(msgs) > 1:
            self._handle_messages(w, msgs[1:])

    def _on_readable(self, w: _Worker) -> None:
        try:
            msgs = w.conn.read_available()
        except (OSError, WireError) as exc:
            self._worker_failed(w, f"connection error: {exc}")
            return
        if msgs is None:
            if w.state == CLOSING:
                self._retired(w)
            else:
                self._worker_failed(w, "connection closed")
            return
        self._handle_messages(w, msgs)

    def _handle_messages(self, w: _Worker, msgs) -> None:
        w.last_seen = time.monotonic()
        for msg in msgs:
            if w.state == DEAD:
                return
            if isinstance(msg, Result):
                for r in msg.results:
                    self._complete(w, r)
                if not w.inflight:
                    if w.state == RETIRING:
                        self._send_shutdown(w)
                    elif w.state == BUSY:
                        w.state = IDLE
                        self._idle.append(w)
            elif isinstance(msg, Heartbeat):
                pass
            elif isinstance(msg, Control) and msg.kind == ControlKind.ACK:
                pass
            else:
                self._worker_failed(w, f"protocol error: unexpected {type(msg).__name__}")

    def _complete(self, w: _Worker, r: TaskResult) -> None:
        entry = self._pending.get(r.id)
        if entry is None or entry.worker != w.id:
            self._stats.duplicates += 1
            return
        del self._pending[r.id]
        w.inflight.pop(r.id, None)
        slot = self._slots.pop(r.id)
        self._stats.completed += 1
        if r.error is not None:
            self._stats.task_errors += 1
        slot.waiter.deliver(slot.index, r)

    def _enqueue(self, specs: List[TaskSpec], slots: List[_Slot]) -> None:
        for spec, slot in zip(specs, slots):
            self._slots[spec.id] = slot
        self._queue.extend(specs)
        self._stats.submitted += len(specs)

    def _dispatch(self) -> None:
        queue, idle = self._queue, self._idle
        now = time.monotonic()
        while queue and idle:
            w = idle.popleft()
            if w.state != IDLE:
                continue
            n = self._slots[queue[0].id].chunk
            batch = []
            while queue and len(batch) < n:
                spec = queue.popleft()
                self._pending[spec.id] = PendingEntry(w.id, spec, now)
                w.inflight[spec.id] = None
                batch.append(spec)
            w.state = BUSY
            self._stats.dispatched += len(batch)
            try:
                w.conn.send_raw(encode_frame(Task(tuple(batch))))
            except OSError as exc:
                self._worker_failed(w, f"send failed: {exc}")

    def _tick(self, now: float) -> None:
        cfg = self.config
        for w in list(self._workers.values()):
            if w.state == DEAD:
                continue
            h = self.backend.poll_job(w.handle)
            if h.state.terminal:
                if w.state == CLOSING:
                    self._retired(w)
                else:
                    self._worker_failed(w, f"job {h.job_id} {h.state.value}: {h.exit_detail}")
                continue
            if w.state == STARTING:
                if now - w.since > cfg.startup_timeout:
                    self._worker_failed(w, "no Hello before startup timeout")
            elif w.state == CLOSING:
                if now - w.since > cfg.retire_grace:
                    self._retired(w)
            elif now - w.last_seen > cfg.heartbeat_timeout:
                self._worker_failed(w, f"no heartbeat for {now - w.last_seen:.2f}s")
        if self._reaping:
            keep = []
            for h, deadline in self._reaping:
                if self.backend.poll_job(h).state.terminal:
                    continue
                if now > deadline or self._closing:
                    self.backend.terminate_job(h)
                else:
                    keep.append((h, deadline))
            self._reaping = keep
        if not self._closing:
            self._maintain()

    # ------------------------------------------------------- worker lifecycle

    def _spawn(self) -> _Worker:
        wid = self._next_worker
        self._next_worker += 1
        env = {
            ENV_MASTER_ADDR: format_address(self.address),
            ENV_WORKER_ID: str(wid),
            ENV_HEARTBEAT_MS: str(max(1, int(self.config.heartbeat_interval * 1000))),
        }
        spec = JobSpec(command=worker_command(self.config.imports), env=env)
        handle = self.backend.submit_job(spec)
        self._handles.append(handle)
        w = _Worker(wid, handle, time.monotonic())
        self._workers[wid] = w
        self._stats.workers_started += 1
        return w

    def _alive(self) -> List[_Worker]:
        return [w for w in self._workers.values() if w.state in _ALIVE]

    def _maintain(self) -> None:
        """Start replacements until the live worker count reaches the target."""
        if self._broken is not None:
            return
        missing = self._target - len(self._alive())
        limit = max(3, 2 * self._target)
        for _ in range(max(0, missing)):
            if self._startup_failures > limit:
                self._broken = PoolBroken(
                    f"{self._startup_failures} workers died before connecting"
                )
                self._fail_everything(self._broken)
                return
            try:
                self._spawn()
            except SpawnFailed as exc:
                log.warning("replacement worker failed to start: %s", exc)
                self._startup_failures += 1
                return

    def _scale(self, target: int) -> None:
        self._target = target
        alive = self._alive()
        if target > len(alive):
            for _ in range(target - len(alive)):
                self._spawn()
            return
        excess = len(alive) - target
        order = {IDLE: 0, STARTING: 1, BUSY: 2}
        for w in sorted(alive, key=lambda w: (order[w.state], -w.id))[:excess]:
            if w.state == IDLE:
                self._stats.active_workers -= 1
                self._send_shutdown(w)
            elif w.state == STARTING:
                self._drop(w)
                self.backend.terminate_job(w.handle)
            else:
                self._stats.active_workers -= 1
                w.state = RETIRING

    def _send_shutdown(self, w: _Worker) -> None:
        w.state = CLOSING
        w.since = time.monotonic()
        try:
            w.conn.send(SHUTDOWN)
        except OSError:
            self._retired(w)

    def _drop(self, w: _Worker) -> None:
        if w.conn is not None:
            try:
                self._sel.unregister(w.conn.sock)
            except (KeyError, ValueError):
                pass
            w.conn.close()
        w.state = DEAD
        self._workers.pop(w.id, None)

    def _retired(self, w: _Worker) -> None:
        """A worker we asked to leave has gone; make sure its job ends."""
        self._drop(w)
        self._reaping.append((w.handle, time.monotonic() + self.config.retire_grace))

    def _worker_failed(self, w: _Worker, reason: str) -> None:
        if w.state == DEAD:
            return
        log.info("worker %d failed: %s", w.id, reason)
        prior = w.state
        if prior in (IDLE, BUSY):
            self._stats.active_workers -= 1
        if prior == STARTING:
            self._startup_failures += 1
        self._drop(w)
        self._stats.workers_failed += 1
        for tid in reversed(list(w.inflight)):
            entry = self._pending.pop(tid)
            spec = entry.spec
            self._stats.failed_attempts += 1
            if spec.attempt + 1 >= self.config.max_attempts:
                slot = self._slots.pop(tid)
                self._stats.poisoned += 1
                slot.waiter.fail(
                    slot.index,
                    TaskPoisoned(slot.index, f"{spec.attempt + 1} attempts lost to worker failure; last: {reason}"),
                )
            else:
                self._queue.appendleft(spec.next_attempt())
                self._stats.resubmissions += 1
        w.inflight.clear()
        self.backend.terminate_job(w.handle)
        if not self._closing and prior in _ALIVE:
            self._maintain()

    # ---------------------------------------------------------------- shutdown

    def _begin_shutdown(self) -> None:
        self._closing = True
        exc = PoolShutDown("pool shut down before the task ran")
        for spec in self._queue:
            slot = self._slots.pop(spec.id)
            self._stats.cancelled += 1
            slot.waiter.fail(slot.index, exc)
        self._queue.clear()
        for tid in list(self._pending):
            entry = self._pending.pop(tid)
            slot = self._slots.pop(tid)
            self._stats.cancelled += 1
            slot.waiter.fail(slot.index, exc)
            w = self._workers.get(entry.worker)
            if w is not None:
                w.inflight.pop(tid, None)
        for w in list(self._workers.values()):
            if w.state in (IDLE, BUSY):
                self._stats.active_workers -= 1
            if w.state in (IDLE, BUSY, RETIRING):
                self._send_shutdown(w)
            elif w.state == STARTING:
                self._drop(w)
                self.backend.terminate_job(w.handle)

    def _finished_closing(self) -> bool:
        return not self._workers

    def _fail_everything(self, exc: Exception) -> None:
        for tid, slot in list(self._slots.items()):
            slot.waiter.fail(slot.index, exc)
        self._slots.clear()
        self._queue.clear()
        self._pending.clear()

    def _teardown(self) -> None:
        self._closing = True
        for w in list(self._workers.values()):
            self._drop(w)
        for h in self._handles:
            try:
                self.backend.terminate_job(h)
            except Exception:
                log.exception("terminating %s", h.job_id)
        for s in (self._listener, self._wake_r, self._wake_w):
            s.close()
        self._sel.close()
        # anything still waiting (e.g. scheduler crash) gets released
        self._fail_everything(PoolShutDown("pool shut down"))
        stats = self._snapshot()
        stats.active_workers = 0
        self._done.set_result(stats)

    def _abort_startup(self) -> None:
        for h in self._handles:
            self.backend.terminate_job(h)
        for s in (self._listener, self._wake_r, self._wake_w):
            s.close()
        self._sel.close()

    # ------------------------------------------------------------- inspection

    def _snapshot(self) -> PoolStats:
        s = PoolStats(**asdict(self._stats))
        s.queued = len(self._queue)
        s.pending = len(self._pending)
        return s

    def _check_invariants(self) -> None:
        s = self._stats
        lhs = s.submitted
        rhs = len(self._queue) + len(self._pending) + s.completed + s.poisoned + s.cancelled
        if lhs != rhs:
            self.invariant_violations.append(f"conservation: submitted={lhs} accounted={rhs}")
        if len(self._queue) <= 10_000:
            overlap = {spec.id for spec in self._queue} & self._pending.keys()
            if overlap:
                self.invariant_violations.append(f"queued and pending at once: {sorted(overlap)}")


def create_pool(workers: int = 4, backend: Union[str, Backend] = "local", **kw: Any) -> Pool:
    return Pool(PoolConfig(workers=workers, backend=backend, **kw))
