"""Shared key-value storage and remote proxy objects.

A :class:`Manager` is the single authority: every put, get and method
call is applied by it, so concurrent clients see one total order per key
and per object. Traffic uses ``Kv`` frames::

    request  Kv(op, request_id, fields)
    reply    Kv(op | 0x80, request_id, fields)   on success
             Kv(0xFF, request_id, (error_name, message))

    PUT     (key, value)                 -> (version u64)
    GET     (key,)                       -> (value, version u64)
    CREATE  (type_name, init_args)       -> (object_id u64)
    CALL    (object_id u64, method, args) -> (result,)
    RELEASE (object_id u64,)             -> ()
"""

from __future__ import annotations

import itertools
import logging
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from .channels import ConnectionLost
from .core import TaskforgeError
from .wire import Connection, Kv, WireError

log = logging.getLogger(__name__)

OP_PUT = 1
OP_GET = 2
OP_CREATE = 3
OP_CALL = 4
OP_RELEASE = 5
REPLY_BIT = 0x80
OP_ERROR = 0xFF

_U64 = struct.Struct(">Q")


class ManagerError(TaskforgeError):
    pass


class BindFailed(ManagerError):
    pass


class KeyNotFound(ManagerError):
    pass


class UnknownType(ManagerError):
    pass


class UnknownObject(ManagerError):
    pass


class UnknownMethod(ManagerError):
    pass


class MethodError(ManagerError):
    pass


_ERRORS = {cls.__name__: cls for cls in (KeyNotFound, UnknownType, UnknownObject, UnknownMethod, MethodError)}


@dataclass
class StoreEntry:
    key: str
    value: bytes
    version: int


@dataclass(frozen=True)
class Arrival:
    """One applied method call, in the order the manager ran it."""

    object_id: int
    method: str
    args: bytes


class _Hosted:
    def __init__(self, type_name: str, obj: Any) -> None:
        self.type_name = type_name
        self.obj = obj
        self.lock = threading.Lock()


class Manager:
    """Serves the store and registered object types on a TCP address."""

    def __init__(self, address: Tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self._requested = address
        self._types: Dict[str, Callable[[bytes], Any]] = {}
        self._store: Dict[str, StoreEntry] = {}
        self._store_lock = threading.Lock()
        self._objects: Dict[int, _Hosted] = {}
        self._objects_lock = threading.Lock()
        self._object_ids = itertools.count(1)
        self._arrivals: List[Arrival] = []
        self._writes: List[Tuple[str, int, bytes]] = []
        self._listener: Optional[socket.socket] = None
        self._conns: List[Connection] = []
        self._stopped = threading.Event()
        self.address: Optional[Tuple[str, int]] = None

    def register(self, type_name: str, factory: Callable[[bytes], Any]) -> None:
        """``factory(init_args)`` builds the object; its public methods take and return bytes."""
        if type_name in self._types:
            raise ValueError(f"type {type_name!r} already registered")
        self._types[type_name] = factory

    def start(self) -> "Manager":
        try:
            self._listener = socket.create_server(self._requested)
        except OSError as exc:
            raise BindFailed(f"cannot bind {self._requested}: {exc}") from exc
        self.address = self._listener.getsockname()[:2]
        threading.Thread(target=self._accept_loop, name="manager", daemon=True).start()
        return self

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        with self._objects_lock:
            conns = list(self._conns)
            self._objects.clear()
        for c in conns:
            c.close()

    def __enter__(self) -> "Manager":
        if self.address is None:
            self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # observation, for tests and replay oracles

    def arrival_log(self, object_id: Optional[int] = None) -> List[Arrival]:
        with self._objects_lock:
            log_ = list(self._arrivals)
        return [a for a in log_ if object_id is None or a.object_id == object_id]

    def write_log(self, key: Optional[str] = None) -> List[Tuple[str, int, bytes]]:
        with self._store_lock:
            return [w for w in self._writes if key is None or w[0] == key]

    # serving

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopped.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn = Connection(sock)
            with self._objects_lock:
                self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: Connection) -> None:
        try:
            while True:
                msg = conn.recv()
                if msg is None or not isinstance(msg, Kv):
                    return
                try:
                    fields = self._apply(msg.op, msg.fields)
                    reply = Kv(msg.op | REPLY_BIT, msg.request_id, fields)
                except ManagerError as exc:
                    reply = Kv(OP_ERROR, msg.request_id, (type(exc).__name__.encode(), str(exc).encode()))
                conn.send(reply)
        except (OSError, WireError):
            return
        finally:
            with self._objects_lock:
                if conn in self._conns:
                    self._conns.remove(conn)
            conn.close()

    def _apply(self, op: int, f: Tuple[bytes, ...]) -> Tuple[bytes, ...]:
        try:
            if op == OP_PUT:
                return (_U64.pack(self._put(f[0].decode(), f[1])),)
            if op == OP_GET:
                e = self._get(f[0].decode())
                return (e.value, _U64.pack(e.version))
            if op == OP_CREATE:
                return (_U64.pack(self._create(f[0].decode(), f[1])),)
            if op == OP_CALL:
                return (self._call(_U64.unpack(f[0])[0], f[1].decode(), f[2]),)
            if op == OP_RELEASE:
                self._release(_U64.unpack(f[0])[0])
                return ()
        except (IndexError, struct.error, UnicodeDecodeError) as exc:
            raise MethodError(f"malformed request: {exc}") from exc
        raise MethodError(f"unknown op {op}")

    def _put(self, key: str, value: bytes) -> int:
        with self._store_lock:
            e = self._store.get(key)
            version = 1 if e is None else e.version + 1
            self._store[key] = StoreEntry(key, value, version)
            self._writes.append((key, version, value))
            return version

    def _get(self, key: str) -> StoreEntry:
        with self._store_lock:
            e = self._store.get(key)
            if e is None:
                raise KeyNotFound(key)
            return StoreEntry(e.key, e.value, e.version)

    def _create(self, type_name: str, args: bytes) -> int:
        factory = self._types.get(type_name)
        if factory is None:
            raise UnknownType(type_name)
        try:
            obj = factory(args)
        except Exception as exc:
            raise MethodError(f"{type_name}(): {type(exc).__name__}: {exc}") from exc
        with self._objects_lock:
            oid = next(self._object_ids)
            self._objects[oid] = _Hosted(type_name, obj)
        return oid

    def _call(self, oid: int, method: str, args: bytes) -> bytes:
        with self._objects_lock:
            hosted = self._objects.get(oid)
        if hosted is None:
            raise UnknownObject(str(oid))
        fn = getattr(hosted.obj, method, None) if not method.startswith("_") else None
        if not callable(fn):
            raise UnknownMethod(f"{hosted.type_name}.{method}")
        with hosted.lock:
            with self._objects_lock:
                if oid not in self._objects:
                    raise UnknownObject(str(oid))
                self._arrivals.append(Arrival(oid, method, args))
            try:
                out = fn(args)
            except Exception as exc:
                raise MethodError(f"{type(exc).__name__}: {exc}") from exc
        return b"" if out is None else bytes(out)

    def _release(self, oid: int) -> None:
        with self._objects_lock:
            if self._objects.pop(oid, None) is None:
                raise UnknownObject(str(oid))


class ManagerClient:
    """Connects to a manager; safe to share across threads (one socket per thread)."""

    def __init__(self, address: Tuple[str, int]) -> None:
        self.address = tuple(address)
        self._local = threading.local()
        self._ids = itertools.count(1)
        self._conns: List[Connection] = []
        self._lock = threading.Lock()

    def __reduce__(self):
        return (ManagerClient, (self.address,))

    def _conn(self) -> Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            try:
                conn = Connection.connect(self.address)
            except OSError as exc:
                raise ConnectionLost(f"manager unreachable: {exc}") from exc
            self._local.conn = conn
            with self._lock:
                self._conns.append(conn)
        return conn

    def _request(self, op: int, *fields: bytes) -> Tuple[bytes, ...]:
        conn = self._conn()
        rid = next(self._ids)
        try:
            conn.send(Kv(op, rid, tuple(fields)))
            reply = conn.recv()
        except (OSError, WireError) as exc:
            self._local.conn = None
            raise ConnectionLost(str(exc)) from exc
        if reply is None:
            self._local.conn = None
            raise ConnectionLost("manager closed the connection")
        if not isinstance(reply, Kv) or reply.request_id != rid:
            raise ManagerError(f"unexpected reply {reply!r}")
        if reply.op == OP_ERROR:
            name, text = reply.fields[0].decode(), reply.fields[1].decode()
            raise _ERRORS.get(name, ManagerError)(text)
        if reply.op != op | REPLY_BIT:
            raise ManagerError(f"reply op {reply.op:#x} for request op {op}")
        return reply.fields

    def kv_put(self, key: str, value: bytes) -> int:
        return _U64.unpack(self._request(OP_PUT, key.encode(), bytes(value))[0])[0]

    def kv_get(self, key: str) -> Tuple[bytes, int]:
        value, version = self._request(OP_GET, key.encode())
        return value, _U64.unpack(version)[0]

    def create(self, type_name: str, init_args: bytes = b"") -> "Proxy":
        oid = _U64.unpack(self._request(OP_CREATE, type_name.encode(), bytes(init_args))[0])[0]
        return Proxy(self, oid, type_name)

    def call(self, object_id: int, method: str, args: bytes = b"") -> bytes:
        return self._request(OP_CALL, _U64.pack(object_id), method.encode(), bytes(args))[0]

    def release(self, object_id: int) -> None:
        self._request(OP_RELEASE, _U64.pack(object_id))

    def close(self) -> None:
        with self._lock:
            conns, self._conns = self._conns, []
        for c in conns:
            c.close()
        self._local = threading.local()


class Proxy:
    """Handle to an object living inside the manager.

    ``proxy.step(b"...")`` is sugar for ``proxy.call("step", b"...")``.
    """

    def __init__(self, client: ManagerClient, object_id: int, type_name: str) -> None:
        self._client = client
        self.object_id = object_id
        self.type_name = type_name

    def __repr__(self) -> str:
        return f"Proxy({self.type_name!r}, object_id={self.object_id}, manager={self._client.address})"

    def call(self, method: str, args: bytes = b"") -> bytes:
        return self._client.call(self.object_id, method, args)

    def release(self) -> None:
        self._client.release(self.object_id)

    def __getattr__(self, method: str) -> Callable[..., bytes]:
        if method.startswith("_"):
            raise AttributeError(method)
        return lambda args=b"": self.call(method, args)
