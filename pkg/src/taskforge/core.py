"""Identifiers, task records and the function registry.

Task code never crosses the wire. Master and workers import the same
modules in the same order, so registering functions yields the same
``FunctionId`` on both sides; a task only carries that id plus an opaque
argument payload.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, NewType, Optional, Union

TaskId = NewType("TaskId", int)
FunctionId = NewType("FunctionId", int)
WorkerId = NewType("WorkerId", int)

TaskFunction = Callable[[bytes], bytes]

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class TaskforgeError(Exception):
    """Base class for every error raised by this package."""


class DuplicateName(TaskforgeError):
    pass


class UnknownFunction(TaskforgeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    id: int
    fn_id: int
    args: bytes
    attempt: int = 0

    def next_attempt(self) -> "TaskSpec":
        return replace(self, attempt=self.attempt + 1)


@dataclass(frozen=True)
class TaskResult:
    """Outcome of one task. ``error`` is set iff the task body raised."""

    id: int
    worker: int
    payload: bytes = b""
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class FunctionRegistry:
    """Maps names to sequential ``FunctionId`` values.

    Registration is expected to happen at import time, before any pool
    starts workers. Lookups are safe from any thread.
    """

    def __init__(self) -> None:
        self._bodies: List[TaskFunction] = []
        self._names: List[str] = []
        self._by_name: Dict[str, int] = {}
        self._lock = threading.Lock()

    def register(self, name: str, body: TaskFunction) -> FunctionId:
        with self._lock:
            if name in self._by_name:
                raise DuplicateName(name)
            fid = len(self._bodies)
            self._bodies.append(body)
            self._names.append(name)
            self._by_name[name] = fid
            return FunctionId(fid)

    def function(self, name: str) -> Callable[[TaskFunction], TaskFunction]:
        """Decorator form of :meth:`register`."""

        def deco(body: TaskFunction) -> TaskFunction:
            self.register(name, body)
            return body

        return deco

    def lookup(self, fn: Union[int, str]) -> TaskFunction:
        return self._bodies[self.resolve(fn)]

    def resolve(self, fn: Union[int, str]) -> FunctionId:
        if isinstance(fn, str):
            try:
                return FunctionId(self._by_name[fn])
            except KeyError:
                raise UnknownFunction(fn) from None
        if not 0 <= fn < len(self._bodies):
            raise UnknownFunction(fn)
        return FunctionId(fn)

    def name_of(self, fid: int) -> str:
        self.resolve(fid)
        return self._names[fid]

    def names(self) -> Dict[str, int]:
        return dict(self._by_name)

    def __len__(self) -> int:
        return len(self._bodies)

    def __contains__(self, name: object) -> bool:
        return name in self._by_name


class TaskIdCounter:
    """Thread-safe source of strictly increasing task ids, starting at 1."""

    def __init__(self) -> None:
        self._last = 0
        self._lock = threading.Lock()

    def next(self) -> TaskId:
        with self._lock:
            self._last += 1
            return TaskId(self._last)

    def take(self, n: int) -> range:
        """Reserve ``n`` consecutive ids in one step."""
        with self._lock:
            start = self._last + 1
            self._last += n
            return range(start, start + n)


#: Process-wide registry used by pools and workers unless told otherwise.
REGISTRY = FunctionRegistry()


def register_function(name: str, body: TaskFunction) -> FunctionId:
    return REGISTRY.register(name, body)


def lookup_function(fid: Union[int, str]) -> TaskFunction:
    return REGISTRY.lookup(fid)


def next_task_id(counter: TaskIdCounter) -> TaskId:
    return counter.next()
