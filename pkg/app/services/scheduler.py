"""Task graph construction, execution on two worker pools, and simulation.

Reference preparation (partition, index, bloom_build) runs on the ordinary
pool; everything that touches reads (dispatch, align, merge) runs on the
secure pool. Each pool's workers are tagged at start-up and a task checks
the tag of the worker it lands on before running, so a misplaced task
fails instead of running in the clear.
"""

import asyncio
import csv
import heapq
import logging
import os
import threading
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from statistics import mean
from typing import Callable, Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

from app.domain.errors import (
    DomainError,
    PlacementViolation,
    SchedulerError,
    TaskFailure,
)
from app.services.cost_model import (
    EnclaveProfile,
    call_time,
    compute_time,
    init_time,
)

logger = logging.getLogger(__name__)

MB = 1 << 20


class TaskKind(str, Enum):
    PARTITION = 'partition'
    INDEX = 'index'
    BLOOM_BUILD = 'bloom_build'
    DISPATCH = 'dispatch'
    ALIGN = 'align'
    MERGE = 'merge'


SECURE_KINDS = frozenset({TaskKind.DISPATCH, TaskKind.ALIGN, TaskKind.MERGE})
STAGE_ORDER = list(TaskKind)


class PoolKind(str, Enum):
    SECURE = 'secure'
    NONSECURE = 'nonsecure'


class ExecutorKind(str, Enum):
    PROCESS = 'process'
    THREAD = 'thread'


@dataclass(frozen=True)
class Task:
    id: str
    kind: TaskKind
    partition_id: Optional[int] = None
    deps: FrozenSet[str] = frozenset()
    declared_working_set: int = 0
    # false only for the insecure baseline, which runs read stages unprotected
    secure: bool = True

    @property
    def requires_secure(self) -> bool:
        return self.secure and self.kind in SECURE_KINDS

    @property
    def pool(self) -> PoolKind:
        return PoolKind.SECURE if self.requires_secure else PoolKind.NONSECURE

    @property
    def working_set_mb(self) -> float:
        return self.declared_working_set / MB


@dataclass
class TaskGraph:
    tasks: Dict[str, Task] = field(default_factory=dict)

    def add(self, task: Task) -> Task:
        if task.id in self.tasks:
            raise SchedulerError(f'duplicate task id {task.id}')
        missing = [d for d in task.deps if d not in self.tasks]
        if missing:
            raise SchedulerError(f'task {task.id} depends on unknown {missing}')
        self.tasks[task.id] = task
        return task

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks.values())

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.tasks

    def __getitem__(self, task_id: str) -> Task:
        return self.tasks[task_id]

    def of_kind(self, kind: TaskKind) -> List[Task]:
        return [t for t in self if t.kind is kind]

    def dependents(self, task_id: str) -> List[Task]:
        return [t for t in self if task_id in t.deps]

    def topological_order(self) -> List[Task]:
        # tasks may only depend on tasks added before them
        return list(self.tasks.values())

    def has_pool(self, pool: PoolKind) -> bool:
        return any(t.pool is pool for t in self)


@dataclass(frozen=True)
class CacheState:
    """Which reference-preparation outputs already exist on disk."""

    partitions: bool = False
    indexes: bool = False
    blooms: bool = False


def task_id(kind: TaskKind, partition_id: Optional[int] = None) -> str:
    return kind.value if partition_id is None else f'{kind.value}:{partition_id}'


def build_task_graph(
    p: int,
    cache: CacheState = CacheState(),
    *,
    working_sets: Optional[Dict[TaskKind, int]] = None,
    secure: bool = True,
) -> TaskGraph:
    """Task DAG for one run, leaving out stages whose products are cached.

    With ``secure=False`` every task is placed on the ordinary pool.
    """
    if p < 1:
        raise SchedulerError(f'partition count must be >= 1, got {p}')
    ws = working_sets or {}
    graph = TaskGraph()

    def add(kind: TaskKind, pid: Optional[int] = None, deps=()) -> str:
        t = graph.add(
            Task(
                id=task_id(kind, pid),
                kind=kind,
                partition_id=pid,
                deps=frozenset(d for d in deps if d),
                declared_working_set=ws.get(kind, 0),
                secure=secure,
            )
        )
        return t.id

    part = None if cache.partitions else add(TaskKind.PARTITION)
    index = {}
    if not cache.indexes:
        index = {i: add(TaskKind.INDEX, i, [part]) for i in range(p)}
    gate = None if cache.blooms else add(TaskKind.BLOOM_BUILD, deps=[part])

    aligns = []
    for i in range(p):
        dispatch = add(TaskKind.DISPATCH, i, [gate])
        aligns.append(add(TaskKind.ALIGN, i, [dispatch, index.get(i)]))
    add(TaskKind.MERGE, deps=aligns)
    return graph


# ----- worker side -----
_worker = threading.local()


def _tag_worker(pool: PoolKind) -> None:
    _worker.pool = pool


def current_pool() -> Optional[PoolKind]:
    return getattr(_worker, 'pool', None)


@dataclass(frozen=True)
class TaskOutcome:
    """What a task body reports back: crossing counts for the cost model."""

    n_ecalls: int = 0
    n_ocalls: int = 0
    detail: Dict[str, int] = field(default_factory=dict)


Runner = Callable[[Task], Optional[TaskOutcome]]


def _invoke(runner: Runner, task: Task) -> Tuple[TaskOutcome, str, str, float]:
    pool = current_pool()
    if pool is not task.pool:
        raise PlacementViolation(
            f'task {task.id} needs the {task.pool.value} pool, '
            f'landed on {pool.value if pool else "an untagged worker"}',
            stage=task.kind.value,
            partition_id=task.partition_id,
        )
    worker = f'{pool.value}-{os.getpid()}-{threading.get_ident()}'
    started = time.perf_counter()
    outcome = runner(task) or TaskOutcome()
    return outcome, pool.value, worker, time.perf_counter() - started


def _make_executor(kind: ExecutorKind, workers: int, pool: PoolKind) -> Executor:
    if kind is ExecutorKind.PROCESS:
        return ProcessPoolExecutor(
            max_workers=workers, initializer=_tag_worker, initargs=(pool,)
        )
    return ThreadPoolExecutor(
        max_workers=workers,
        thread_name_prefix=f'sealmap-{pool.value}',
        initializer=_tag_worker,
        initargs=(pool,),
    )


# ----- reporting -----
@dataclass
class TaskTiming:
    task_id: str
    kind: TaskKind
    partition_id: Optional[int]
    pool: PoolKind
    worker: str
    wall_s: float
    modeled_overhead_s: float = 0.0
    start_s: float = 0.0
    end_s: float = 0.0
    outcome: TaskOutcome = field(default_factory=TaskOutcome)

    @property
    def reported_s(self) -> float:
        return self.wall_s + self.modeled_overhead_s


def _partition_cell(partition_id: Optional[int]) -> str:
    return '' if partition_id is None else str(partition_id)


@dataclass
class RunReport:
    partitions: int
    timings: List[TaskTiming]
    total_s: float
    measured_wall_s: float = 0.0
    notes: Dict[str, str] = field(default_factory=dict)

    def stage(self, kind: TaskKind) -> List[TaskTiming]:
        return [t for t in self.timings if t.kind is kind]

    def rollup(self, kind: TaskKind) -> Optional[Tuple[float, float, float]]:
        times = [t.reported_s for t in self.stage(kind)]
        if not times:
            return None
        return min(times), mean(times), max(times)

    def critical_path_s(self, graph: TaskGraph) -> float:
        """Longest dependency chain of reported task times."""
        took = {t.task_id: t.reported_s for t in self.timings}
        finish: Dict[str, float] = {}
        for task in graph.topological_order():
            start = max((finish[d] for d in task.deps), default=0.0)
            finish[task.id] = start + took.get(task.id, 0.0)
        return max(finish.values(), default=0.0)

    def csv_rows(self) -> List[Dict[str, str]]:
        rows = []
        for kind in STAGE_ORDER:
            stage = self.stage(kind)
            if not stage:
                continue
            lo, avg, hi = self.rollup(kind)
            by_partition = sorted(
                stage, key=lambda t: (t.partition_id is None, t.partition_id)
            )
            for t in by_partition:
                rows.append(
                    {
                        'stage': kind.value,
                        'partition': _partition_cell(t.partition_id),
                        'wall_s': f'{t.wall_s:.6f}',
                        'modeled_overhead_s': f'{t.modeled_overhead_s:.6f}',
                        'min_s': f'{lo:.6f}',
                        'avg_s': f'{avg:.6f}',
                        'max_s': f'{hi:.6f}',
                    }
                )
        rows.append(
            {
                'stage': 'total',
                'partition': '',
                'wall_s': f'{self.measured_wall_s:.6f}',
                'modeled_overhead_s': f'{self.total_s - self.measured_wall_s:.6f}',
                'min_s': f'{self.total_s:.6f}',
                'avg_s': f'{self.total_s:.6f}',
                'max_s': f'{self.total_s:.6f}',
            }
        )
        return rows

    def write_csv(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        rows = self.csv_rows()
        with open(target, 'w', newline='') as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        return target


REPORT_COLUMNS = [
    'stage',
    'partition',
    'wall_s',
    'modeled_overhead_s',
    'min_s',
    'avg_s',
    'max_s',
]


class EnclaveCharger:
    """Adds modeled enclave costs to secure task times.

    Initialization is charged once per secure worker, on its first task.
    """

    def __init__(
        self, profile: Optional[EnclaveProfile], heap_mb: Optional[float] = None
    ):
        self.profile = profile
        if heap_mb is None:
            heap_mb = profile.heap_mb if profile else 0
        self.heap_mb = heap_mb
        self._started = set()

    def overhead(
        self, task: Task, worker: str, base_time: float, outcome: TaskOutcome
    ) -> float:
        if self.profile is None or not task.requires_secure:
            return 0.0
        extra = 0.0
        if worker not in self._started:
            self._started.add(worker)
            extra += init_time(self.profile, self.heap_mb)
        extra += call_time(self.profile, outcome.n_ecalls, outcome.n_ocalls)
        extra += compute_time(self.profile, task.working_set_mb, base_time) - base_time
        return extra


def _check_workers(
    graph: TaskGraph, secure_workers: int, nonsecure_workers: int
) -> None:
    if graph.has_pool(PoolKind.SECURE) and secure_workers < 1:
        raise SchedulerError('graph has secure tasks but no secure workers')
    if graph.has_pool(PoolKind.NONSECURE) and nonsecure_workers < 1:
        raise SchedulerError('graph has reference tasks but no ordinary workers')


async def execute(
    graph: TaskGraph,
    runner: Runner,
    *,
    secure_workers: int,
    nonsecure_workers: int,
    profile: Optional[EnclaveProfile] = None,
    executor: ExecutorKind = ExecutorKind.PROCESS,
    heap_mb: Optional[float] = None,
) -> RunReport:
    """Run ``graph`` in dependency order on the two pools.

    On the first failure no further task is started, tasks already running
    are allowed to finish, and a ``TaskFailure`` naming the failed task is
    raised.
    """
    _check_workers(graph, secure_workers, nonsecure_workers)
    loop = asyncio.get_running_loop()
    pools: Dict[PoolKind, Executor] = {}
    if graph.has_pool(PoolKind.SECURE):
        pools[PoolKind.SECURE] = _make_executor(
            executor, secure_workers, PoolKind.SECURE
        )
    if graph.has_pool(PoolKind.NONSECURE):
        pools[PoolKind.NONSECURE] = _make_executor(
            executor, nonsecure_workers, PoolKind.NONSECURE
        )

    charger = EnclaveCharger(profile, heap_mb)
    waiting = {t.id: len(t.deps) for t in graph}
    ready = [t for t in graph if not t.deps]
    running: Dict[asyncio.Future, Task] = {}
    timings: List[TaskTiming] = []
    t0 = time.perf_counter()

    try:
        while ready or running:
            for task in ready:
                logger.debug('starting %s on %s pool', task.id, task.pool.value)
                fut = loop.run_in_executor(pools[task.pool], _invoke, runner, task)
                running[fut] = task
            ready = []

            done, _ = await asyncio.wait(running, return_when=asyncio.FIRST_COMPLETED)
            for fut in done:
                task = running.pop(fut)
                try:
                    outcome, pool, worker, wall = fut.result()
                except Exception as e:
                    await _drain(running)
                    raise _failure(task, e) from e
                end = time.perf_counter() - t0
                timings.append(
                    TaskTiming(
                        task_id=task.id,
                        kind=task.kind,
                        partition_id=task.partition_id,
                        pool=PoolKind(pool),
                        worker=worker,
                        wall_s=wall,
                        modeled_overhead_s=charger.overhead(
                            task, worker, wall, outcome
                        ),
                        start_s=end - wall,
                        end_s=end,
                        outcome=outcome,
                    )
                )
                for dep in graph.dependents(task.id):
                    waiting[dep.id] -= 1
                    if waiting[dep.id] == 0:
                        ready.append(dep)
    finally:
        for ex in pools.values():
            ex.shutdown(wait=True, cancel_futures=True)

    measured = time.perf_counter() - t0
    modeled = simulate(
        graph,
        {t.task_id: t.reported_s for t in timings},
        secure_workers=secure_workers,
        nonsecure_workers=nonsecure_workers,
    )
    logger.info(
        'executed %s tasks in %.3fs (modeled %.3fs)',
        len(timings),
        measured,
        modeled.makespan,
    )
    return RunReport(
        partitions=len(graph.of_kind(TaskKind.ALIGN)),
        timings=timings,
        total_s=max(measured, modeled.makespan),
        measured_wall_s=measured,
    )


async def _drain(running: Dict[asyncio.Future, Task]) -> None:
    for fut in running:
        fut.cancel()
    if running:
        await asyncio.gather(*running, return_exceptions=True)
    for task in running.values():
        logger.info('cancelled %s after an upstream failure', task.id)
    running.clear()


def _failure(task: Task, error: Exception) -> TaskFailure:
    logger.error('task %s failed: %s', task.id, error)
    if isinstance(error, DomainError):
        return TaskFailure(
            f'task {task.id} failed: [{error.code}] {error.message}',
            stage=error.stage or task.kind.value,
            partition_id=(
                error.partition_id
                if error.partition_id is not None
                else task.partition_id
            ),
            path=error.path,
        )
    return TaskFailure(
        f'task {task.id} failed: {type(error).__name__}: {error}',
        stage=task.kind.value,
        partition_id=task.partition_id,
    )


# ----- simulation -----
@dataclass
class SimulationResult:
    makespan: float
    timings: List[TaskTiming]

    def stage_span(self, kind: TaskKind) -> float:
        """First start to last finish among tasks of ``kind``."""
        stage = [t for t in self.timings if t.kind is kind]
        if not stage:
            return 0.0
        return max(t.end_s for t in stage) - min(t.start_s for t in stage)


def simulate(
    graph: TaskGraph,
    durations: Union[Dict[str, float], Callable[[Task], float]],
    *,
    secure_workers: int,
    nonsecure_workers: int,
    profile: Optional[EnclaveProfile] = None,
    heap_mb: Optional[float] = None,
    calls: Optional[Callable[[Task], TaskOutcome]] = None,
) -> SimulationResult:
    """Discrete-event list schedule of ``graph`` with known task durations.

    Ready tasks are taken in graph order and placed on the lowest-numbered
    free worker of their pool. With a profile, secure tasks are charged like
    :func:`execute` charges them.
    """
    _check_workers(graph, secure_workers, nonsecure_workers)
    if callable(durations):
        duration_of = durations
    else:
        def duration_of(task: Task) -> float:
            return durations[task.id]

    charger = EnclaveCharger(profile, heap_mb)
    free = {
        PoolKind.SECURE: list(range(secure_workers)),
        PoolKind.NONSECURE: list(range(nonsecure_workers)),
    }
    for workers in free.values():
        heapq.heapify(workers)

    waiting = {t.id: len(t.deps) for t in graph}
    ready = [t for t in graph if not t.deps]
    events: List[Tuple[float, int, str, int]] = []
    timings: List[TaskTiming] = []
    now = 0.0
    seq = 0

    while ready or events:
        still_waiting = []
        for task in ready:
            if not free[task.pool]:
                still_waiting.append(task)
                continue
            slot = heapq.heappop(free[task.pool])
            worker = f'{task.pool.value}-{slot}'
            base = float(duration_of(task))
            outcome = calls(task) if calls else TaskOutcome()
            extra = charger.overhead(task, worker, base, outcome)
            end = now + base + extra
            timings.append(
                TaskTiming(
                    task_id=task.id,
                    kind=task.kind,
                    partition_id=task.partition_id,
                    pool=task.pool,
                    worker=worker,
                    wall_s=base,
                    modeled_overhead_s=extra,
                    start_s=now,
                    end_s=end,
                    outcome=outcome,
                )
            )
            heapq.heappush(events, (end, seq, task.id, slot))
            seq += 1
        ready = still_waiting

        if not events:
            break
        now, _, done_id, slot = heapq.heappop(events)
        heapq.heappush(free[graph[done_id].pool], slot)
        for dep in graph.dependents(done_id):
            waiting[dep.id] -= 1
            if waiting[dep.id] == 0:
                ready.append(dep)

    return SimulationResult(makespan=now, timings=timings)
