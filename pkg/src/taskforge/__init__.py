"""taskforge: master-worker task pools over job-backed worker processes."""

from . import tasks  # noqa: F401  (registers the built-in functions first)
from .backend import (
    Backend,
    JobHandle,
    JobSpec,
    JobState,
    LocalBackend,
    SimBackend,
    SimEvent,
    SimScript,
    SpawnFailed,
    UnknownJob,
)
from .core import (
    REGISTRY,
    DuplicateName,
    FunctionRegistry,
    TaskforgeError,
    TaskIdCounter,
    TaskResult,
    TaskSpec,
    UnknownFunction,
    lookup_function,
    next_task_id,
    register_function,
)
from .pool import (
    Pool,
    PoolBroken,
    PoolConfig,
    PoolShutDown,
    PoolStats,
    TaskError,
    TaskPoisoned,
    create_pool,
)

__version__ = "0.1.0"
