"""Built-in task functions, registered on import in a fixed order.

Importing this module is what makes a master and its workers agree on
function ids, so never reorder the registrations below; append new ones.
"""

import struct

from . import workloads
from .codec import pack_int, unpack_float, unpack_int
from .core import REGISTRY
from .worker import WorkerCrash

_FAULTY = struct.Struct(">qBd")  # value, crash flag, seconds of sleep


@REGISTRY.function("echo")
def echo(payload: bytes) -> bytes:
    return payload


@REGISTRY.function("double")
def double(payload: bytes) -> bytes:
    return pack_int(2 * unpack_int(payload))


@REGISTRY.function("sleep")
def sleep(payload: bytes) -> bytes:
    workloads.sleep_task(unpack_float(payload))
    return b""


@REGISTRY.function("spin")
def spin(payload: bytes) -> bytes:
    workloads.spin(unpack_float(payload))
    return b""


@REGISTRY.function("raise_error")
def raise_error(payload: bytes) -> bytes:
    raise ValueError(payload.decode("utf-8", "replace") or "task failed")


@REGISTRY.function("square")
def square(payload: bytes) -> bytes:
    """Square ``value``, optionally sleeping first; crash the worker if flagged."""
    value, crash, delay = _FAULTY.unpack(payload)
    if crash:
        raise WorkerCrash(f"poison input {value}")
    if delay > 0:
        workloads.sleep_task(delay)
    return pack_int(value * value)


def square_payload(value: int, delay: float = 0.0, crash: bool = False) -> bytes:
    return _FAULTY.pack(value, int(crash), delay)


REGISTRY.register("pi_chunk", workloads.pi_task)
REGISTRY.register("es_eval", workloads.es_eval_task)
