"""Distributed queue and pipe.

``DistQueue`` is brokered: a :class:`QueueBroker` (normally in the master
process) owns bounded buffers and every producer/consumer connects to it,
which makes exactly-once delivery a local decision at the broker.
``Pipe`` ends talk directly to each other and keep per-direction order.

Queue requests and replies travel in ``Data`` frames whose payload starts
with one op byte (see ``docs/wire.md``); the frame ``seq`` echoes the
request number so replies can be matched.
"""

from __future__ import annotations

import collections
import itertools
import select
import socket
import threading
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Tuple

from .core import TaskforgeError
from .wire import SHUTDOWN, Connection, Control, ControlKind, Data, WireError

DEFAULT_CAPACITY = 4096

OP_PUT = 1
OP_GET = 2
OP_CLOSE = 3
OP_ITEM = 4
OP_ACK = 5
OP_CLOSED = 6
OP_ERROR = 7


class ChannelError(TaskforgeError):
    pass


class QueueClosed(ChannelError):
    pass


class ConnectionLost(ChannelError):
    pass


class PipeClosed(ChannelError):
    pass


class PipeBroken(ChannelError):
    pass


class _Buffer:
    def __init__(self, capacity: int, lock: threading.Lock) -> None:
        self.capacity = capacity
        self.items: Deque[bytes] = collections.deque()
        self.closed = False
        self.cond = threading.Condition(lock)
        self.max_depth = 0


class QueueBroker:
    """Hosts any number of bounded queues behind one listening socket."""

    def __init__(self, address: Tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self._listener = socket.create_server(address)
        self.address: Tuple[str, int] = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._queues: Dict[int, _Buffer] = {}
        self._ids = itertools.count(1)
        self._conns: List[Connection] = []
        self._stopped = False
        self._thread = threading.Thread(target=self._accept_loop, name="queue-broker", daemon=True)
        self._thread.start()

    def __enter__(self) -> "QueueBroker":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def create_queue(self, capacity: int = DEFAULT_CAPACITY) -> "DistQueue":
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        with self._lock:
            cid = next(self._ids)
            self._queues[cid] = _Buffer(capacity, self._lock)
        return DistQueue(self.address, cid)

    def depth(self, channel_id: int) -> int:
        with self._lock:
            return len(self._queues[channel_id].items)

    def max_depth(self, channel_id: int) -> int:
        with self._lock:
            return self._queues[channel_id].max_depth

    def stop(self) -> None:
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
            for q in self._queues.values():
                q.closed = True
                q.cond.notify_all()
            conns = list(self._conns)
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        for c in conns:
            c.close()

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn = Connection(sock)
            with self._lock:
                if self._stopped:
                    conn.close()
                    return
                self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: Connection) -> None:
        try:
            while True:
                msg = conn.recv()
                if msg is None:
                    return
                if not isinstance(msg, Data) or not msg.payload:
                    return
                op, body = msg.payload[0], msg.payload[1:]
                reply_op, reply = self._apply(msg.channel_id, op, body)
                conn.send(Data(msg.channel_id, msg.seq, bytes([reply_op]) + reply))
        except (OSError, WireError):
            return
        finally:
            with self._lock:
                if conn in self._conns:
                    self._conns.remove(conn)
            conn.close()

    def _apply(self, cid: int, op: int, body: bytes) -> Tuple[int, bytes]:
        with self._lock:
            q = self._queues.get(cid)
            if q is None:
                return OP_ERROR, f"unknown queue {cid}".encode()
            if op == OP_PUT:
                while not q.closed and len(q.items) >= q.capacity:
                    q.cond.wait()
                if q.closed:
                    return OP_CLOSED, b""
                q.items.append(body)
                q.max_depth = max(q.max_depth, len(q.items))
                q.cond.notify_all()
                return OP_ACK, b""
            if op == OP_GET:
                while not q.items and not q.closed:
                    q.cond.wait()
                if q.items:
                    item = q.items.popleft()
                    q.cond.notify_all()
                    return OP_ITEM, item
                return OP_CLOSED, b""
            if op == OP_CLOSE:
                q.closed = True
                q.cond.notify_all()
                return OP_ACK, b""
            return OP_ERROR, f"bad queue op {op}".encode()


class DistQueue:
    """Client handle for a brokered queue.

    Picklable (address + channel id), so it can be handed to other
    processes. Each thread gets its own connection to the broker.
    """

    def __init__(self, address: Tuple[str, int], channel_id: int) -> None:
        self.address = tuple(address)
        self.channel_id = channel_id
        self._local = threading.local()
        self._all: List[Connection] = []
        self._lock = threading.Lock()

    def __reduce__(self):
        return (DistQueue, (self.address, self.channel_id))

    def __repr__(self) -> str:
        return f"DistQueue({self.address!r}, channel_id={self.channel_id})"

    def _conn(self) -> Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            try:
                conn = Connection.connect(self.address)
            except OSError as exc:
                raise ConnectionLost(f"broker unreachable: {exc}") from exc
            self._local.conn = conn
            self._local.seq = 0
            with self._lock:
                self._all.append(conn)
        return conn

    def _request(self, op: int, body: bytes = b"") -> Tuple[int, bytes]:
        conn = self._conn()
        self._local.seq += 1
        seq = self._local.seq
        try:
            conn.send(Data(self.channel_id, seq, bytes([op]) + body))
            reply = conn.recv()
        except (OSError, WireError) as exc:
            self._local.conn = None
            raise ConnectionLost(str(exc)) from exc
        if reply is None:
            self._local.conn = None
            raise ConnectionLost("broker closed the connection")
        if not isinstance(reply, Data) or reply.seq != seq or not reply.payload:
            raise ChannelError(f"unexpected broker reply {reply!r}")
        rop, rbody = reply.payload[0], reply.payload[1:]
        if rop == OP_CLOSED:
            raise QueueClosed(f"queue {self.channel_id} is closed")
        if rop == OP_ERROR:
            raise ChannelError(rbody.decode("utf-8", "replace"))
        return rop, rbody

    def put(self, item: bytes) -> None:
        """Blocks while the queue is full."""
        self._request(OP_PUT, bytes(item))

    def get(self) -> bytes:
        """Blocks while the queue is empty; QueueClosed once closed and drained."""
        return self._request(OP_GET)[1]

    def close(self) -> None:
        try:
            self._request(OP_CLOSE)
        except (QueueClosed, ConnectionLost):
            pass

    def disconnect(self) -> None:
        with self._lock:
            conns, self._all = self._all, []
        for c in conns:
            c.close()
        self._local = threading.local()


_CLOSED = object()


class PipeEnd:
    """One end of an ordered, bidirectional pipe.

    Every payload carries a per-direction sequence number starting at 0;
    the receiver checks there are no gaps.
    """

    def __init__(self, conn: Connection, channel_id: int = 0) -> None:
        self._conn = conn
        self.channel_id = channel_id
        self._send_seq = 0
        self._recv_seq = 0
        self._inbox: Deque[object] = collections.deque()
        self._peer_closed = False
        self._broken = False
        self._closed = False
        self._send_lock = threading.Lock()

    def __enter__(self) -> "PipeEnd":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def fileno(self) -> int:
        return self._conn.fileno()

    def _absorb(self, msgs) -> None:
        for m in msgs:
            if isinstance(m, Data):
                self._inbox.append(m)
            elif isinstance(m, Control) and m.kind == ControlKind.SHUTDOWN:
                self._peer_closed = True
                self._inbox.append(_CLOSED)
            else:
                raise ChannelError(f"unexpected message on pipe: {m!r}")

    def _read_once(self) -> None:
        try:
            msgs = self._conn.read_available()
        except (OSError, WireError):
            msgs = None
        if msgs is None:
            if not self._peer_closed:
                self._broken = True
            return
        self._absorb(msgs)

    def poll(self, timeout: float = 0.0) -> bool:
        """True if ``recv`` would not block."""
        if self._inbox or self._broken:
            return True
        if self._closed:
            return False
        r, _, _ = select.select([self._conn.sock], [], [], timeout)
        if r:
            self._read_once()
        return bool(self._inbox) or self._broken

    def send(self, payload: bytes) -> None:
        if self._closed:
            raise PipeClosed("this end is closed")
        with self._send_lock:
            # notice a peer that has already gone before writing into the void
            if not self._peer_closed and not self._broken:
                r, _, _ = select.select([self._conn.sock], [], [], 0)
                if r:
                    self._read_once()
            if self._peer_closed or self._broken:
                raise PipeBroken("peer has gone")
            try:
                self._conn.send(Data(self.channel_id, self._send_seq, bytes(payload)))
            except OSError as exc:
                self._broken = True
                raise PipeBroken(str(exc)) from exc
            self._send_seq += 1

    def recv(self) -> bytes:
        while True:
            if self._inbox:
                item = self._inbox[0]
                if item is _CLOSED:
                    raise PipeClosed("peer closed the pipe")
                self._inbox.popleft()
                if item.seq != self._recv_seq:
                    raise ChannelError(f"pipe sequence gap: expected {self._recv_seq}, got {item.seq}")
                self._recv_seq += 1
                return item.payload
            if self._broken:
                raise PipeBroken("connection lost")
            if self._closed:
                raise PipeClosed("this end is closed")
            self._read_once()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if not self._broken:
                self._conn.send(SHUTDOWN)
            self._conn.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._conn.close()

    @property
    def sent(self) -> int:
        return self._send_seq

    @property
    def received(self) -> int:
        return self._recv_seq


class PipeListener:
    def __init__(self, address: Tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self._sock = socket.create_server(address)
        self.address: Tuple[str, int] = self._sock.getsockname()[:2]

    def accept(self, timeout: Optional[float] = None, channel_id: int = 0) -> PipeEnd:
        self._sock.settimeout(timeout)
        sock, _ = self._sock.accept()
        sock.settimeout(None)
        return PipeEnd(Connection(sock), channel_id)

    def close(self) -> None:
        self._sock.close()


def connect_pipe(address: Tuple[str, int], channel_id: int = 0) -> PipeEnd:
    return PipeEnd(Connection.connect(address), channel_id)


def Pipe(channel_id: int = 0) -> Tuple[PipeEnd, PipeEnd]:
    """Two connected ends over loopback TCP, like ``multiprocessing.Pipe()``."""
    listener = PipeListener()
    try:
        a = connect_pipe(listener.address, channel_id)
        b = listener.accept(timeout=10, channel_id=channel_id)
    finally:
        listener.close()
    return a, b


@dataclass(frozen=True)
class QueueRef:
    address: Tuple[str, int]
    channel_id: int

    def open(self) -> DistQueue:
        return DistQueue(self.address, self.channel_id)
