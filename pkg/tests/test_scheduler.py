import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.domain.errors import (
    ConfigError,
    PlacementViolation,
    SchedulerError,
    TaskFailure,
)
from app.services.cost_model import EnclaveProfile
from app.services.scheduler import (
    MB,
    REPORT_COLUMNS,
    CacheState,
    ExecutorKind,
    PoolKind,
    RunReport,
    Task,
    TaskKind,
    TaskOutcome,
    TaskTiming,
    _invoke,
    _tag_worker,
    build_task_graph,
    current_pool,
    execute,
    simulate,
)

REF_CACHED = CacheState(partitions=True, indexes=True)


# ----- graph -----
def test_single_partition_is_a_four_node_chain():
    graph = build_task_graph(1, REF_CACHED)
    assert [t.id for t in graph.topological_order()] == [
        'bloom_build',
        'dispatch:0',
        'align:0',
        'merge',
    ]
    assert graph['dispatch:0'].deps == {'bloom_build'}
    assert graph['align:0'].deps == {'dispatch:0'}
    assert graph['merge'].deps == {'align:0'}


def test_merge_waits_for_every_align():
    graph = build_task_graph(3, REF_CACHED)
    assert graph['merge'].deps == {'align:0', 'align:1', 'align:2'}


def test_full_graph_from_scratch():
    graph = build_task_graph(4)
    counts = {kind: len(graph.of_kind(kind)) for kind in TaskKind}
    assert counts == {
        TaskKind.PARTITION: 1,
        TaskKind.INDEX: 4,
        TaskKind.BLOOM_BUILD: 1,
        TaskKind.DISPATCH: 4,
        TaskKind.ALIGN: 4,
        TaskKind.MERGE: 1,
    }
    assert graph['align:2'].deps == {'dispatch:2', 'index:2'}
    assert graph['bloom_build'].deps == {'partition'}


def test_cached_references_drop_preparation_nodes():
    graph = build_task_graph(4, CacheState(partitions=True, indexes=True, blooms=True))
    kinds = {t.kind for t in graph}
    assert kinds == {TaskKind.DISPATCH, TaskKind.ALIGN, TaskKind.MERGE}
    assert all(not t.deps for t in graph.of_kind(TaskKind.DISPATCH))


def test_secure_flag_follows_kind():
    graph = build_task_graph(2)
    for task in graph:
        expected = task.kind in {TaskKind.DISPATCH, TaskKind.ALIGN, TaskKind.MERGE}
        assert task.requires_secure is expected
        assert task.pool is (PoolKind.SECURE if expected else PoolKind.NONSECURE)


def test_insecure_graph_uses_only_ordinary_pool():
    graph = build_task_graph(2, secure=False)
    assert len(graph) == len(build_task_graph(2))
    assert not graph.has_pool(PoolKind.SECURE)
    assert all(not t.requires_secure for t in graph)


def test_graph_rejects_bad_partition_count():
    with pytest.raises(SchedulerError):
        build_task_graph(0)


def test_working_sets_are_declared():
    graph = build_task_graph(2, working_sets={TaskKind.ALIGN: 200 * MB})
    assert graph['align:1'].working_set_mb == 200
    assert graph['dispatch:1'].working_set_mb == 0


# ----- placement -----
def test_untagged_worker_refuses_secure_task():
    task = Task(id='align:0', kind=TaskKind.ALIGN, partition_id=0)
    with pytest.raises(PlacementViolation) as e:
        _invoke(lambda t: None, task)
    assert e.value.partition_id == 0


def test_ordinary_worker_refuses_secure_task():
    task = Task(id='dispatch:3', kind=TaskKind.DISPATCH, partition_id=3)
    ordinary = (PoolKind.NONSECURE,)
    tagged = ThreadPoolExecutor(1, initializer=_tag_worker, initargs=ordinary)
    with tagged as ex, pytest.raises(PlacementViolation):
        ex.submit(_invoke, lambda t: None, task).result()


async def test_randomized_schedules_keep_secure_tasks_secure():
    rng = np.random.default_rng(5)
    trace = []
    lock = threading.Lock()

    def runner(task):
        with lock:
            trace.append((task.kind, current_pool()))

    for _ in range(100):
        p = int(rng.integers(1, 9))
        cache = CacheState(*(bool(b) for b in rng.integers(0, 2, size=3)))
        graph = build_task_graph(p, cache)
        report = await execute(
            graph,
            runner,
            secure_workers=int(rng.integers(1, 5)),
            nonsecure_workers=int(rng.integers(1, 5)),
            executor=ExecutorKind.THREAD,
        )
        assert len(report.timings) == len(graph)
    assert trace
    assert not [
        kind
        for kind, pool in trace
        if kind in {TaskKind.DISPATCH, TaskKind.ALIGN, TaskKind.MERGE}
        and pool is not PoolKind.SECURE
    ]
    assert all(
        pool is PoolKind.NONSECURE
        for kind, pool in trace
        if kind in {TaskKind.PARTITION, TaskKind.INDEX, TaskKind.BLOOM_BUILD}
    )


# ----- execution -----
async def test_execute_respects_dependencies():
    finished = []
    lock = threading.Lock()

    def runner(task):
        with lock:
            assert all(d in finished for d in task.deps), task.id
            finished.append(task.id)

    graph = build_task_graph(4)
    report = await execute(
        graph,
        runner,
        secure_workers=2,
        nonsecure_workers=2,
        executor=ExecutorKind.THREAD,
    )
    assert set(finished) == set(graph.tasks)
    assert finished[-1] == 'merge'
    assert report.partitions == 4
    assert report.total_s >= report.critical_path_s(graph) - 1e-6


async def test_failure_names_the_task_and_stops():
    started = []

    def runner(task):
        started.append(task.id)
        if task.id == 'align:1':
            raise ConfigError('aligner exploded', path='/tmp/x')

    graph = build_task_graph(2, REF_CACHED)
    with pytest.raises(TaskFailure) as e:
        await execute(
            graph,
            runner,
            secure_workers=1,
            nonsecure_workers=1,
            executor=ExecutorKind.THREAD,
        )
    assert e.value.partition_id == 1
    assert e.value.stage == 'align'
    assert e.value.path == '/tmp/x'
    assert 'config_error' in e.value.message
    assert 'merge' not in started


async def test_unexpected_exceptions_are_wrapped():
    def runner(task):
        if task.kind is TaskKind.MERGE:
            raise RuntimeError('disk full')

    graph = build_task_graph(1, REF_CACHED)
    with pytest.raises(TaskFailure) as e:
        await execute(
            graph,
            runner,
            secure_workers=1,
            nonsecure_workers=1,
            executor=ExecutorKind.THREAD,
        )
    assert 'RuntimeError' in e.value.message
    assert e.value.stage == 'merge'


async def test_missing_pool_is_rejected():
    with pytest.raises(SchedulerError):
        await execute(
            build_task_graph(1),
            lambda t: None,
            secure_workers=1,
            nonsecure_workers=0,
            executor=ExecutorKind.THREAD,
        )


async def test_profile_charges_init_once_per_worker():
    profile = EnclaveProfile(heap_mb=1024)

    def runner(task):
        return TaskOutcome(n_ocalls=1_000_000)

    graph = build_task_graph(2, CacheState(True, True, True))
    report = await execute(
        graph,
        runner,
        secure_workers=1,
        nonsecure_workers=1,
        profile=profile,
        executor=ExecutorKind.THREAD,
    )
    overheads = sorted(t.modeled_overhead_s for t in report.timings)
    # five tasks on one secure worker: one pays 40.96 s init, all pay 5.27 s calls
    assert overheads[:4] == pytest.approx([5.27] * 4)
    assert overheads[4] == pytest.approx(40.96 + 5.27)
    assert report.total_s >= sum(overheads)


async def test_execute_reports_modeled_makespan():
    profile = EnclaveProfile(heap_mb=1024)
    graph = build_task_graph(1, CacheState(True, True, True))
    report = await execute(
        graph,
        lambda t: None,
        secure_workers=1,
        nonsecure_workers=1,
        profile=profile,
        executor=ExecutorKind.THREAD,
    )
    # dispatch, align and merge form one chain on the secure worker
    assert [t.kind for t in report.timings] == [
        TaskKind.DISPATCH,
        TaskKind.ALIGN,
        TaskKind.MERGE,
    ]
    assert report.total_s == pytest.approx(sum(t.reported_s for t in report.timings))
    assert report.total_s >= 40.96
    assert report.total_s == pytest.approx(report.critical_path_s(graph))


async def test_insecure_run_skips_secure_pool_and_cost_model():
    seen = []

    def runner(task):
        seen.append((task.kind, current_pool()))

    report = await execute(
        build_task_graph(2, secure=False),
        runner,
        secure_workers=0,
        nonsecure_workers=2,
        profile=EnclaveProfile(heap_mb=1024),
        executor=ExecutorKind.THREAD,
    )
    assert len(seen) == 1 + 2 + 1 + 2 + 2 + 1
    assert {pool for _, pool in seen} == {PoolKind.NONSECURE}
    assert all(t.pool is PoolKind.NONSECURE for t in report.timings)
    assert all(t.modeled_overhead_s == 0 for t in report.timings)


# ----- simulation -----
def _unit_graph(p):
    return build_task_graph(p, CacheState(True, True, True))


def test_many_workers_run_aligns_together():
    result = simulate(
        _unit_graph(80), lambda t: 1.0, secure_workers=80, nonsecure_workers=1
    )
    assert result.stage_span(TaskKind.ALIGN) == pytest.approx(1.0)
    assert result.makespan == pytest.approx(3.0)


def test_one_worker_runs_everything_in_sequence():
    result = simulate(
        _unit_graph(80), lambda t: 1.0, secure_workers=1, nonsecure_workers=1
    )
    assert result.stage_span(TaskKind.ALIGN) >= 80 - 1e-9
    assert result.makespan == pytest.approx(161.0)


def test_simulation_with_durations_by_id():
    graph = build_task_graph(1, REF_CACHED)
    durations = {'bloom_build': 2.0, 'dispatch:0': 1.0, 'align:0': 5.0, 'merge': 0.5}
    result = simulate(graph, durations, secure_workers=4, nonsecure_workers=4)
    assert result.makespan == pytest.approx(8.5)


def test_simulation_applies_paging_step():
    profile = EnclaveProfile(heap_mb=0)
    graph = build_task_graph(
        1, CacheState(True, True, True), working_sets={TaskKind.ALIGN: 100 * MB}
    )
    result = simulate(
        graph, lambda t: 3.0, secure_workers=1, nonsecure_workers=1, profile=profile
    )
    align = next(t for t in result.timings if t.kind is TaskKind.ALIGN)
    assert align.reported_s == pytest.approx(300.0)
    assert result.makespan == pytest.approx(306.0)


# ----- report -----
def _timing(kind, pid, wall, extra=0.0):
    return TaskTiming(
        task_id=f'{kind.value}:{pid}',
        kind=kind,
        partition_id=pid,
        pool=PoolKind.SECURE,
        worker='w',
        wall_s=wall,
        modeled_overhead_s=extra,
    )


def test_report_rollup_and_csv(tmp_path):
    report = RunReport(
        partitions=3,
        timings=[
            _timing(TaskKind.ALIGN, 2, 3.0),
            _timing(TaskKind.ALIGN, 0, 1.0, 1.0),
            _timing(TaskKind.ALIGN, 1, 4.0),
        ],
        total_s=10.0,
        measured_wall_s=8.0,
    )
    assert report.rollup(TaskKind.ALIGN) == pytest.approx((2.0, 3.0, 4.0))
    assert report.rollup(TaskKind.MERGE) is None
    rows = report.csv_rows()
    assert [r['partition'] for r in rows] == ['0', '1', '2', '']
    assert rows[-1]['stage'] == 'total'
    assert rows[-1]['modeled_overhead_s'] == '2.000000'

    path = report.write_csv(tmp_path / 'out' / 'report.csv')
    lines = path.read_text().splitlines()
    assert lines[0] == ','.join(REPORT_COLUMNS)
    assert len(lines) == 5
