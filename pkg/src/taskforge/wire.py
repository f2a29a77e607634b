"""Length-prefixed frames carried over stream sockets.

Every frame is::

    u32 length (big-endian, counts everything after itself)
    u8  version (always 1)
    u8  msg_type
    ... payload (length - 2 bytes, at most 16 MiB)

Payload layouts per ``msg_type`` are documented in ``docs/wire.md`` and
pinned by golden-byte tests. All integers are big-endian.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from typing import Deque, Iterable, Iterator, List, Optional, Tuple, Union

from .core import TaskResult, TaskSpec, TaskforgeError

VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
HEADER = struct.Struct(">IBB")
HEADER_SIZE = HEADER.size  # 6

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_TASK = struct.Struct(">QIHI")  # id, fn_id, attempt, args_len
_RESULT = struct.Struct(">QIBI")  # id, worker, status, body_len
_DATA = struct.Struct(">IQ")  # channel_id, seq
_HEARTBEAT = struct.Struct(">IQ")  # worker, monotonic_ms
_KV = struct.Struct(">BQH")  # op, request_id, field count


class WireError(TaskforgeError):
    pass


class Incomplete(WireError):
    """The buffer holds less than one full frame."""


class BadVersion(WireError):
    pass


class UnknownMsgType(WireError):
    pass


class PayloadTooLarge(WireError):
    pass


class MalformedMessage(WireError):
    pass


class TruncatedStream(WireError):
    """The peer closed the connection in the middle of a frame."""


class MsgType(enum.IntEnum):
    TASK = 1
    RESULT = 2
    DATA = 3
    HEARTBEAT = 4
    CONTROL = 5
    KV = 6


class ControlKind(enum.IntEnum):
    SHUTDOWN = 0
    ACK = 1
    HELLO = 2


@dataclass(frozen=True)
class Task:
    """A dispatch of one or more task specs (a batch)."""

    specs: Tuple[TaskSpec, ...]


@dataclass(frozen=True)
class Result:
    results: Tuple[TaskResult, ...]


@dataclass(frozen=True)
class Data:
    channel_id: int
    seq: int
    payload: bytes


@dataclass(frozen=True)
class Heartbeat:
    worker: int
    monotonic_ms: int


@dataclass(frozen=True)
class Control:
    kind: ControlKind
    worker: Optional[int] = None  # only for HELLO


@dataclass(frozen=True)
class Kv:
    op: int
    request_id: int
    fields: Tuple[bytes, ...] = ()


Message = Union[Task, Result, Data, Heartbeat, Control, Kv]

SHUTDOWN = Control(ControlKind.SHUTDOWN)
ACK = Control(ControlKind.ACK)


def hello(worker: int) -> Control:
    return Control(ControlKind.HELLO, worker)


def _encode_body(m: Message) -> Tuple[int, bytes]:
    if isinstance(m, Task):
        parts = [_U32.pack(len(m.specs))]
        for s in m.specs:
            parts.append(_TASK.pack(s.id, s.fn_id, s.attempt, len(s.args)))
            parts.append(s.args)
        return MsgType.TASK, b"".join(parts)
    if isinstance(m, Result):
        parts = [_U32.pack(len(m.results))]
        for r in m.results:
            if r.error is None:
                status, body = 0, r.payload
            else:
                status, body = 1, r.error.encode("utf-8")
            parts.append(_RESULT.pack(r.id, r.worker, status, len(body)))
            parts.append(body)
        return MsgType.RESULT, b"".join(parts)
    if isinstance(m, Data):
        return MsgType.DATA, _DATA.pack(m.channel_id, m.seq) + m.payload
    if isinstance(m, Heartbeat):
        return MsgType.HEARTBEAT, _HEARTBEAT.pack(m.worker, m.monotonic_ms)
    if isinstance(m, Control):
        if m.kind == ControlKind.HELLO:
            if m.worker is None:
                raise MalformedMessage("Hello needs a worker id")
            return MsgType.CONTROL, _U8.pack(m.kind) + _U32.pack(m.worker)
        if m.worker is not None:
            raise MalformedMessage(f"{m.kind.name} carries no worker id")
        return MsgType.CONTROL, _U8.pack(m.kind)
    if isinstance(m, Kv):
        parts = [_KV.pack(m.op, m.request_id, len(m.fields))]
        for f in m.fields:
            parts.append(_U32.pack(len(f)))
            parts.append(f)
        return MsgType.KV, b"".join(parts)
    raise TypeError(f"not a message: {m!r}")


def encode_frame(m: Message) -> bytes:
    try:
        msg_type, body = _encode_body(m)
    except struct.error as exc:
        raise MalformedMessage(str(exc)) from None
    if len(body) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload {len(body)} bytes > {MAX_PAYLOAD}")
    return HEADER.pack(len(body) + 2, VERSION, msg_type) + body


def _decode_body(msg_type: int, body: memoryview) -> Message:
    n = len(body)
    if msg_type == MsgType.TASK:
        (count,) = _U32.unpack_from(body, 0)
        pos = 4
        specs = []
        for _ in range(count):
            tid, fid, attempt, alen = _TASK.unpack_from(body, pos)
            pos += _TASK.size
            if pos + alen > n:
                raise MalformedMessage("task args overrun")
            specs.append(TaskSpec(tid, fid, bytes(body[pos : pos + alen]), attempt))
            pos += alen
        _expect_end(pos, n)
        return Task(tuple(specs))
    if msg_type == MsgType.RESULT:
        (count,) = _U32.unpack_from(body, 0)
        pos = 4
        results = []
        for _ in range(count):
            tid, worker, status, blen = _RESULT.unpack_from(body, pos)
            pos += _RESULT.size
            if pos + blen > n:
                raise MalformedMessage("result body overrun")
            raw = bytes(body[pos : pos + blen])
            pos += blen
            if status == 0:
                results.append(TaskResult(tid, worker, raw))
            elif status == 1:
                results.append(TaskResult(tid, worker, b"", raw.decode("utf-8", "replace")))
            else:
                raise MalformedMessage(f"bad result status {status}")
        _expect_end(pos, n)
        return Result(tuple(results))
    if msg_type == MsgType.DATA:
        channel_id, seq = _DATA.unpack_from(body, 0)
        return Data(channel_id, seq, bytes(body[_DATA.size :]))
    if msg_type == MsgType.HEARTBEAT:
        _expect_end(_HEARTBEAT.size, n)
        return Heartbeat(*_HEARTBEAT.unpack_from(body, 0))
    if msg_type == MsgType.CONTROL:
        (raw_kind,) = _U8.unpack_from(body, 0)
        try:
            kind = ControlKind(raw_kind)
        except ValueError:
            raise MalformedMessage(f"bad control kind {raw_kind}") from None
        if kind == ControlKind.HELLO:
            _expect_end(5, n)
            return Control(kind, _U32.unpack_from(body, 1)[0])
        _expect_end(1, n)
        return Control(kind)
    if msg_type == MsgType.KV:
        op, rid, count = _KV.unpack_from(body, 0)
        pos = _KV.size
        fields = []
        for _ in range(count):
            (flen,) = _U32.unpack_from(body, pos)
            pos += 4
            if pos + flen > n:
                raise MalformedMessage("kv field overrun")
            fields.append(bytes(body[pos : pos + flen]))
            pos += flen
        _expect_end(pos, n)
        return Kv(op, rid, tuple(fields))
    raise UnknownMsgType(msg_type)


def _expect_end(pos: int, n: int) -> None:
    if pos != n:
        raise MalformedMessage(f"{n - pos} trailing bytes")


def _check_header(buf, offset: int) -> int:
    """Validate the header at ``offset``; return the full frame size."""
    avail = len(buf) - offset
    if avail < 4:
        raise Incomplete(f"need 4 header bytes, have {avail}")
    (length,) = _U32.unpack_from(buf, offset)
    if length < 2:
        raise MalformedMessage(f"frame length {length} < 2")
    if length > MAX_PAYLOAD + 2:
        raise PayloadTooLarge(f"frame length {length}")
    if avail < 4 + length:
        raise Incomplete(f"need {4 + length} bytes, have {avail}")
    if buf[offset + 4] != VERSION:
        raise BadVersion(buf[offset + 4])
    return 4 + length


def decode_frame(buf, offset: int = 0) -> Tuple[Message, int]:
    """Decode one frame from ``buf[offset:]``; return (message, bytes consumed)."""
    size = _check_header(buf, offset)
    msg_type = buf[offset + 5]
    if msg_type not in MsgType._value2member_map_:
        raise UnknownMsgType(msg_type)
    body = memoryview(buf)[offset + HEADER_SIZE : offset + size]
    try:
        return _decode_body(msg_type, body), size
    except struct.error as exc:
        raise MalformedMessage(str(exc)) from None
    finally:
        body.release()


class FrameReader:
    """Incremental decoder: feed arbitrary chunks, get whole messages."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        buf = self._buf
        buf += data
        out = []
        pos = 0
        while True:
            try:
                msg, used = decode_frame(buf, pos)
            except Incomplete:
                break
            out.append(msg)
            pos += used
        if pos:
            del buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """Signal end of stream; raise if a partial frame is pending."""
        if self._buf:
            n = len(self._buf)
            self._buf.clear()
            raise TruncatedStream(f"{n} bytes of an unfinished frame")


def read_frames(chunks: Iterable[bytes]) -> Iterator[Message]:
    """Yield messages from an iterable of byte chunks (a finished stream)."""
    reader = FrameReader()
    for chunk in chunks:
        yield from reader.feed(chunk)
    reader.close()


RECV_SIZE = 1 << 18


class Connection:
    """A framed, blocking socket connection.

    ``send`` may be called from several threads. ``recv`` belongs to one
    reader at a time.
    """

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._reader = FrameReader()
        self._inbox: Deque[Message] = deque()
        self._send_lock = threading.Lock()
        self.eof = False
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    @classmethod
    def connect(cls, address: Tuple[str, int], timeout: Optional[float] = 10.0) -> "Connection":
        sock = socket.create_connection(address, timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def fileno(self) -> int:
        return self.sock.fileno()

    def send(self, m: Message) -> None:
        data = encode_frame(m)
        with self._send_lock:
            self.sock.sendall(data)

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    def read_available(self) -> Optional[List[Message]]:
        """One ``recv`` call's worth of messages; ``None`` on clean EOF.

        Meant for selector loops: call only when the socket is readable.
        """
        data = self.sock.recv(RECV_SIZE)
        if not data:
            self.eof = True
            self._reader.close()
            return None
        return self._reader.feed(data)

    def recv(self) -> Optional[Message]:
        """Block for the next message; ``None`` on clean EOF."""
        while not self._inbox:
            if self.eof:
                return None
            msgs = self.read_available()
            if msgs is None:
                return None
            self._inbox.extend(msgs)
        return self._inbox.popleft()

    def has_buffered(self) -> bool:
        return bool(self._inbox)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host.strip("[]"), int(port)


def format_address(address: Tuple[str, int]) -> str:
    return f"{address[0]}:{address[1]}"
