"""Job lifecycle backends: create, poll and terminate worker jobs.

Pools only talk to the :class:`Backend` interface, so swapping the local
process backend for the simulated one needs no other change.
"""

from __future__ import annotations

import abc
import enum
import os
import subprocess
import sys
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .core import TaskforgeError
from .worker import (
    ENV_FAULT,
    ENV_MASTER_ADDR,
    ENV_WORKER_ID,
    EXIT_OK,
    Fault,
    WorkerRuntime,
)


class SpawnFailed(TaskforgeError):
    pass


class UnknownJob(TaskforgeError):
    pass


class JobState(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (JobState.FINISHED, JobState.FAILED)


@dataclass
class JobSpec:
    command: List[str]
    env: Dict[str, str]
    image: str = "local"
    cpu_request: float = 1.0

    def validate(self) -> None:
        if not self.command:
            raise SpawnFailed("empty command")
        if ENV_MASTER_ADDR not in self.env:
            raise SpawnFailed(f"env lacks {ENV_MASTER_ADDR}")
        if self.cpu_request <= 0:
            raise SpawnFailed("cpu_request must be positive")


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    worker: int
    state: JobState
    exit_detail: Optional[str] = None
    pid: Optional[int] = None


@dataclass(frozen=True)
class SimEvent:
    """Make the worker of the ``worker_index``-th submitted job misbehave."""

    kind: str
    worker_index: int
    after_tasks: int

    @property
    def fault(self) -> Fault:
        return Fault(self.kind, self.after_tasks)


@dataclass
class SimScript:
    events: List[SimEvent] = field(default_factory=list)

    @classmethod
    def kills(cls, worker_indices: Sequence[int], after_tasks: int) -> "SimScript":
        return cls([SimEvent("fail", i, after_tasks) for i in worker_indices])

    def fail(self, worker_index: int, after_tasks: int) -> "SimScript":
        self.events.append(SimEvent("fail", worker_index, after_tasks))
        return self

    def hang(self, worker_index: int, after_tasks: int) -> "SimScript":
        self.events.append(SimEvent("hang", worker_index, after_tasks))
        return self

    def fault_for(self, worker_index: int) -> Optional[Fault]:
        for ev in self.events:
            if ev.worker_index == worker_index:
                return ev.fault
        return None


def worker_command(imports: Sequence[str] = ()) -> List[str]:
    """The command that starts a worker from the current interpreter."""
    cmd = [sys.executable, "-m", "taskforge", "worker"]
    for mod in imports:
        cmd += ["--import", mod]
    return cmd


class Backend(abc.ABC):
    """Creates and tracks worker jobs. Safe for concurrent use."""

    name = "abstract"

    def __init__(self, script: Optional[SimScript] = None) -> None:
        self.script = script or SimScript()
        self._lock = threading.RLock()
        self._submitted = 0

    def _next_index(self) -> int:
        with self._lock:
            i = self._submitted
            self._submitted += 1
            return i

    @abc.abstractmethod
    def submit_job(self, spec: JobSpec) -> JobHandle: ...

    @abc.abstractmethod
    def poll_job(self, handle: Union[JobHandle, str]) -> JobHandle: ...

    @abc.abstractmethod
    def terminate_job(self, handle: Union[JobHandle, str]) -> None: ...

    @abc.abstractmethod
    def list_jobs(self) -> List[JobHandle]: ...

    def close(self) -> None:
        for h in self.list_jobs():
            self.terminate_job(h)


def _job_id(handle: Union[JobHandle, str]) -> str:
    return handle if isinstance(handle, str) else handle.job_id


class _LocalJob:
    def __init__(self, handle: JobHandle, proc: subprocess.Popen) -> None:
        self.handle = handle
        self.proc = proc
        self.terminated = False


class LocalBackend(Backend):
    """Each job is an OS process on this machine."""

    name = "local"

    def __init__(self, script: Optional[SimScript] = None, stderr=None) -> None:
        super().__init__(script)
        self._jobs: Dict[str, _LocalJob] = {}
        self._stderr = stderr

    def submit_job(self, spec: JobSpec) -> JobHandle:
        spec.validate()
        index = self._next_index()
        env = dict(os.environ)
        env.update(spec.env)
        fault = self.script.fault_for(index)
        if fault is not None:
            env[ENV_FAULT] = fault.encode()
        src = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
        try:
            proc = subprocess.Popen(
                spec.command,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.DEVNULL,
                stderr=self._stderr,
                close_fds=True,
            )
        except OSError as exc:
            raise SpawnFailed(f"{spec.command[0]}: {exc}") from exc
        handle = JobHandle(
            f"local-{index}", int(spec.env.get(ENV_WORKER_ID, -1)), JobState.RUNNING, pid=proc.pid
        )
        with self._lock:
            self._jobs[handle.job_id] = _LocalJob(handle, proc)
        return handle

    def _get(self, handle) -> _LocalJob:
        try:
            return self._jobs[_job_id(handle)]
        except KeyError:
            raise UnknownJob(_job_id(handle)) from None

    def _refresh(self, job: _LocalJob) -> JobHandle:
        if job.handle.state.terminal:
            return job.handle
        rc = job.proc.poll()
        if rc is None:
            return job.handle
        if job.terminated:
            job.handle = replace(job.handle, state=JobState.FAILED, exit_detail="terminated")
        elif rc == EXIT_OK:
            job.handle = replace(job.handle, state=JobState.FINISHED, exit_detail="exit 0")
        elif rc < 0:
            job.handle = replace(job.handle, state=JobState.FAILED, exit_detail=f"signal {-rc}")
        else:
            job.handle = replace(job.handle, state=JobState.FAILED, exit_detail=f"exit code {rc}")
        return job.handle

    def poll_job(self, handle) -> JobHandle:
        with self._lock:
            return self._refresh(self._get(handle))

    def terminate_job(self, handle) -> None:
        with self._lock:
            job = self._get(handle)
            if self._refresh(job).state.terminal:
                return
            job.terminated = True
            job.proc.terminate()
        try:
            job.proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            job.proc.kill()
            job.proc.wait()
        with self._lock:
            self._refresh(job)

    def list_jobs(self) -> List[JobHandle]:
        with self._lock:
            return [h for h in (self._refresh(j) for j in self._jobs.values()) if not h.state.terminal]


class _SimJob:
    def __init__(self, handle: JobHandle, runtime: WorkerRuntime) -> None:
        self.handle = handle
        self.runtime = runtime
        self.thread: Optional[threading.Thread] = None
        self.terminated = False


class SimBackend(Backend):
    """Workers run as threads in this process, driven by a :class:`SimScript`.

    ``transitions`` records every (job_id, state, detail) change in order.
    """

    name = "sim"

    def __init__(self, script: Optional[SimScript] = None) -> None:
        super().__init__(script)
        self._jobs: Dict[str, _SimJob] = {}
        self.transitions: List[Tuple[str, str, Optional[str]]] = []

    def _set(self, job: _SimJob, state: JobState, detail: Optional[str]) -> None:
        with self._lock:
            if job.handle.state.terminal:
                return
            job.handle = replace(job.handle, state=state, exit_detail=detail)
            self.transitions.append((job.handle.job_id, state.value, detail))

    def submit_job(self, spec: JobSpec) -> JobHandle:
        spec.validate()
        index = self._next_index()
        fault = self.script.fault_for(index)
        env = dict(spec.env)
        env.pop(ENV_FAULT, None)
        try:
            runtime = WorkerRuntime.from_env(env, fault=fault)
        except (KeyError, ValueError) as exc:
            raise SpawnFailed(f"bad worker env: {exc}") from exc
        job = _SimJob(JobHandle(f"sim-{index}", runtime.worker_id, JobState.PENDING), runtime)
        with self._lock:
            self._jobs[job.handle.job_id] = job
            self.transitions.append((job.handle.job_id, JobState.PENDING.value, None))
        self._set(job, JobState.RUNNING, None)
        handle = job.handle
        job.thread = threading.Thread(
            target=self._run, args=(job,), name=f"sim-worker-{runtime.worker_id}", daemon=True
        )
        job.thread.start()
        return handle

    def _run(self, job: _SimJob) -> None:
        code = job.runtime.run()
        if job.terminated:
            self._set(job, JobState.FAILED, "terminated")
        elif code == EXIT_OK:
            self._set(job, JobState.FINISHED, "exit 0")
        elif job.runtime.exit_detail == "scripted-failure":
            self._set(job, JobState.FAILED, "sim-scripted-failure")
        else:
            self._set(job, JobState.FAILED, job.runtime.exit_detail or f"exit code {code}")

    def _get(self, handle) -> _SimJob:
        try:
            return self._jobs[_job_id(handle)]
        except KeyError:
            raise UnknownJob(_job_id(handle)) from None

    def poll_job(self, handle) -> JobHandle:
        with self._lock:
            return self._get(handle).handle

    def terminate_job(self, handle) -> None:
        with self._lock:
            job = self._get(handle)
            if job.handle.state.terminal:
                return
            # a worker that already exited on its own keeps its real outcome
            job.terminated = job.runtime.exit_code is None
        job.runtime.kill()
        if job.thread is not None and job.thread is not threading.current_thread():
            job.thread.join(timeout=2.0)
        if job.terminated:
            self._set(job, JobState.FAILED, "terminated")

    def list_jobs(self) -> List[JobHandle]:
        with self._lock:
            return [j.handle for j in self._jobs.values() if not j.handle.state.terminal]

    def history(self, job_id: str) -> List[Tuple[str, Optional[str]]]:
        with self._lock:
            return [(s, d) for j, s, d in self.transitions if j == job_id]


BACKENDS = {"local": LocalBackend, "sim": SimBackend}


def make_backend(kind: Union[str, Backend], script: Optional[SimScript] = None) -> Backend:
    if isinstance(kind, Backend):
        if script is not None:
            kind.script = script
        return kind
    try:
        cls = BACKENDS[kind]
    except KeyError:
        raise ValueError(f"unknown backend {kind!r}; choose from {sorted(BACKENDS)}") from None
    return cls(script)
