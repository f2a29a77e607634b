"""Benchmark workloads: fixed-duration sleep tasks, Monte-Carlo pi, and ES.

The ES loop keeps all randomness on the master: it draws noise-table
indices centrally and ships (theta, index) pairs; every worker regenerates
the same seeded noise table once and reads slices from it. Results come
back in input order, so the trajectory does not depend on the pool size.
"""

from __future__ import annotations

import functools
import statistics
import struct
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence

import numpy as np

from .codec import pack_float, unpack_float
from .core import TaskforgeError

if TYPE_CHECKING:
    from .pool import Pool

DURATIONS = {"1s": 1.0, "100ms": 0.1, "10ms": 0.01, "1ms": 0.001}


class IndexOutOfRange(TaskforgeError):
    pass


# --------------------------------------------------------------- overhead


def sleep_task(duration: float) -> float:
    """Wait at least ``duration`` seconds on the monotonic clock; return elapsed."""
    start = time.monotonic()
    if duration <= 0:
        return 0.0
    deadline = start + duration
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            return time.monotonic() - start
        time.sleep(left)


def spin(duration: float) -> None:
    """Burn ``duration`` seconds of this thread's CPU time.

    Measured on the thread CPU clock, so workers sharing a core take
    proportionally longer in wall time.
    """
    deadline = time.thread_time() + duration
    while time.thread_time() < deadline:
        pass


@dataclass
class OverheadConfig:
    task_duration: float
    workers: int = 5
    target_total: float = 1.0
    repetitions: int = 5

    @property
    def batch_size(self) -> int:
        exact = self.workers * self.target_total / self.task_duration
        n = round(exact)
        if n < 1 or abs(n - exact) > 1e-6 * exact:
            raise ValueError(
                f"workers*target_total/task_duration = {exact} is not a positive integer"
            )
        return n

    @property
    def ideal(self) -> float:
        return self.batch_size * self.task_duration / self.workers


@dataclass
class OverheadReport:
    task_duration: float
    batch_size: int
    ideal: float
    measured: List[float]
    warmup: float

    @property
    def median(self) -> float:
        return statistics.median(self.measured)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.measured)

    @property
    def ratio(self) -> float:
        return self.median / self.ideal


def overhead_chunksize(cfg: OverheadConfig) -> int:
    """Tasks per dispatch: amortize framing for tiny tasks, keep the tail short.

    Aims for roughly 10 ms of work per dispatch and at least 20 dispatches
    per worker.
    """
    per_worker = cfg.batch_size // cfg.workers
    by_time = max(1, int(0.01 / cfg.task_duration))
    return max(1, min(by_time, per_worker // 20 or 1))


def run_overhead(cfg: OverheadConfig, pool: "Pool", chunksize: Optional[int] = None) -> OverheadReport:
    n = cfg.batch_size
    chunk = chunksize or overhead_chunksize(cfg)
    payloads = [pack_float(cfg.task_duration)] * n

    def once() -> float:
        t0 = time.perf_counter()
        pool.map("sleep", payloads, chunksize=chunk)
        return time.perf_counter() - t0

    warmup = once()
    measured = [once() for _ in range(cfg.repetitions)]
    return OverheadReport(cfg.task_duration, n, cfg.ideal, measured, warmup)


# --------------------------------------------------------------------- pi

PI_CHUNK = 100_000
_PI_TASK = struct.Struct(">QQQ")  # seed, chunk index, samples in chunk


def pi_chunk_count(seed: int, chunk: int, n: int) -> int:
    xy = np.random.default_rng([seed, chunk]).random((n, 2))
    return int(np.count_nonzero(xy[:, 0] ** 2 + xy[:, 1] ** 2 < 1.0))


def pi_payloads(samples: int, seed: int, chunk: int = PI_CHUNK) -> List[bytes]:
    out = []
    for i, start in enumerate(range(0, samples, chunk)):
        out.append(_PI_TASK.pack(seed, i, min(chunk, samples - start)))
    return out


def pi_task(payload: bytes) -> bytes:
    seed, chunk, n = _PI_TASK.unpack(payload)
    return struct.pack(">Q", pi_chunk_count(seed, chunk, n))


def estimate_pi(pool: "Pool", samples: int, seed: int = 0) -> float:
    if samples <= 0:
        raise ValueError("samples must be > 0")
    counts = pool.map("pi_chunk", pi_payloads(samples, seed))
    return 4.0 * sum(struct.unpack(">Q", c)[0] for c in counts) / samples


def estimate_pi_sequential(samples: int, seed: int = 0) -> float:
    total = 0
    for payload in pi_payloads(samples, seed):
        total += struct.unpack(">Q", pi_task(payload))[0]
    return 4.0 * total / samples


# --------------------------------------------------------------------- ES


@dataclass
class EsConfig:
    dim: int = 10
    population: int = 64
    sigma: float = 0.1
    alpha: float = 0.1
    iterations: int = 100
    seed: int = 42
    noise_table_len: int = 1_000_000
    # informational: every worker holds an identical seeded replica
    workers_per_table: int = 8
    init_norm: float = 5.0
    eval_cost: float = 0.0  # seconds of CPU busy-work per evaluation
    chunksize: int = 1

    def validate(self) -> None:
        if min(self.dim, self.population, self.noise_table_len, self.workers_per_table) < 1:
            raise ValueError("dim, population, noise_table_len, workers_per_table must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.sigma <= 0 or self.alpha <= 0:
            raise ValueError("sigma and alpha must be positive")
        if self.noise_table_len < self.dim:
            raise ValueError("noise_table_len must be >= dim")


class NoiseTable:
    """A seeded block of standard-normal float32 draws, read by slices."""

    def __init__(self, seed: int, length: int) -> None:
        self.seed = seed
        self.length = length
        self.values = np.random.default_rng(seed).standard_normal(length, dtype=np.float32)
        self.values.setflags(write=False)

    def sample(self, index: int, dim: int) -> np.ndarray:
        if index < 0 or index + dim > self.length:
            raise IndexOutOfRange(f"slice [{index}, {index + dim}) outside table of {self.length}")
        return self.values[index : index + dim].astype(np.float64)


@functools.lru_cache(maxsize=4)
def get_noise_table(seed: int, length: int) -> NoiseTable:
    return NoiseTable(seed, length)


def sample_noise(table: NoiseTable, index: int, dim: int) -> np.ndarray:
    return table.sample(index, dim)


def evaluate_sphere(theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return -float(np.dot(theta, theta))


@dataclass
class EsState:
    theta: np.ndarray
    iteration: int = 0


def es_step(
    state: EsState,
    cfg: EsConfig,
    rewards: Sequence[float],
    indices: Sequence[int],
    table: NoiseTable,
) -> EsState:
    """theta' = theta + alpha / (N * sigma) * sum_i rewards[i] * noise(indices[i])."""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    if n != len(indices) or n != cfg.population:
        raise ValueError(f"need {cfg.population} rewards and indices, got {n} and {len(indices)}")
    s = np.zeros(cfg.dim)
    for r, idx in zip(rewards, indices):
        s += r * table.sample(int(idx), cfg.dim)
    theta = state.theta + (cfg.alpha / (n * cfg.sigma)) * s
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("theta became non-finite")
    return EsState(theta, state.iteration + 1)


def centered_ranks(rewards: Sequence[float]) -> np.ndarray:
    """Map rewards to evenly spaced ranks in [-0.5, 0.5] (ties by position)."""
    x = np.asarray(rewards, dtype=np.float64)
    ranks = np.empty(len(x))
    ranks[np.argsort(x, kind="stable")] = np.arange(len(x))
    if len(x) > 1:
        ranks /= len(x) - 1
    return ranks - 0.5


_ES_TASK = struct.Struct(">QQQdd")  # table seed, table len, index, sigma, eval cost


def table_seed(cfg: EsConfig) -> int:
    return cfg.seed


def es_payload(cfg: EsConfig, theta: np.ndarray, index: int) -> bytes:
    head = _ES_TASK.pack(table_seed(cfg), cfg.noise_table_len, index, cfg.sigma, cfg.eval_cost)
    return head + np.ascontiguousarray(theta, dtype=">f8").tobytes()


def es_eval_task(payload: bytes) -> bytes:
    seed, length, index, sigma, cost = _ES_TASK.unpack_from(payload)
    theta = np.frombuffer(payload, dtype=">f8", offset=_ES_TASK.size).astype(np.float64)
    table = get_noise_table(seed, length)
    reward = evaluate_sphere(theta + sigma * table.sample(index, len(theta)))
    if cost > 0:
        spin(cost)
    return pack_float(reward)


@dataclass
class EsRecord:
    iteration: int
    best_reward: float
    theta_norm: float


@dataclass
class EsRun:
    trajectory: List[EsRecord] = field(default_factory=list)
    thetas: List[np.ndarray] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]


def initial_theta(cfg: EsConfig) -> np.ndarray:
    v = np.random.default_rng([cfg.seed, 2]).standard_normal(cfg.dim)
    return v / np.linalg.norm(v) * cfg.init_norm


def run_es(cfg: EsConfig, pool: Optional["Pool"] = None) -> EsRun:
    """Run ES; with ``pool=None`` every evaluation runs in this process."""
    cfg.validate()
    t0 = time.perf_counter()
    table = get_noise_table(table_seed(cfg), cfg.noise_table_len)
    rng = np.random.default_rng([cfg.seed, 1])
    state = EsState(initial_theta(cfg))
    run = EsRun()
    run.trajectory.append(EsRecord(0, evaluate_sphere(state.theta), float(np.linalg.norm(state.theta))))
    run.thetas.append(state.theta.copy())
    for _ in range(cfg.iterations):
        indices = rng.integers(0, cfg.noise_table_len - cfg.dim + 1, size=cfg.population)
        payloads = [es_payload(cfg, state.theta, int(i)) for i in indices]
        if pool is None:
            outs = [es_eval_task(p) for p in payloads]
        else:
            outs = pool.map("es_eval", payloads, chunksize=cfg.chunksize)
        rewards = [unpack_float(o) for o in outs]
        state = es_step(state, cfg, centered_ranks(rewards), indices, table)
        run.trajectory.append(
            EsRecord(state.iteration, max(rewards), float(np.linalg.norm(state.theta)))
        )
        run.thetas.append(state.theta.copy())
    run.wall_time = time.perf_counter() - t0
    return run
