"""Partition-count benchmark.

A calibration run at p=1 measures how long dispatch, align and merge take
on this machine. Those times are then scaled to a reference of
``reference_mb`` megabytes and pushed through the enclave cost model:

* the baseline is one secure worker aligning the whole reference, so its
  working set never fits in the enclave page cache;
* the parallel time for p partitions is a simulated schedule of the real
  task graph on p secure workers, each align task doing 1/p of the work
  over 1/p of the reference.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

from app.services.cost_model import EnclaveProfile, io_ocalls, model_secure_overhead
from app.services.pipeline import PipelineResult
from app.services.scheduler import (
    MB,
    CacheState,
    RunReport,
    Task,
    TaskKind,
    TaskOutcome,
    build_task_graph,
    simulate,
)
from app.services.sealvault import KeyPolicy, SealVault

logger = logging.getLogger(__name__)

DEFAULT_REFERENCE_MB = 3200.0


@dataclass(frozen=True)
class Calibration:
    dispatch_s: float
    align_s: float
    merge_s: float
    input_bytes: int = 0

    @classmethod
    def from_report(cls, report: RunReport, input_bytes: int = 0) -> 'Calibration':
        def total(kind: TaskKind) -> float:
            return sum(t.wall_s for t in report.stage(kind))

        return cls(
            dispatch_s=total(TaskKind.DISPATCH),
            align_s=total(TaskKind.ALIGN),
            merge_s=total(TaskKind.MERGE),
            input_bytes=input_bytes,
        )


@dataclass
class BenchRow:
    partitions: int
    measured_wall_s: Optional[float]
    baseline_s: float
    parallel_s: float
    speedup: float
    nonsecure_parallel_s: float


def _model_graph(p: int, reference_mb: float, input_bytes: int):
    return build_task_graph(
        p,
        CacheState(partitions=True, indexes=True, blooms=True),
        working_sets={
            TaskKind.DISPATCH: input_bytes,
            TaskKind.ALIGN: int(reference_mb * MB / p),
            TaskKind.MERGE: input_bytes,
        },
    )


def modeled_baseline(
    cal: Calibration,
    profile: EnclaveProfile,
    reference_mb: float = DEFAULT_REFERENCE_MB,
) -> float:
    """Secure sequential alignment of the whole reference in one enclave."""
    return model_secure_overhead(
        profile,
        profile.heap_mb,
        n_ecalls=1,
        n_ocalls=io_ocalls(2 * cal.input_bytes),
        working_set_mb=reference_mb,
        base_time=cal.align_s,
    )


def modeled_parallel(
    cal: Calibration,
    p: int,
    profile: Optional[EnclaveProfile],
    reference_mb: float = DEFAULT_REFERENCE_MB,
    secure_workers: Optional[int] = None,
) -> float:
    graph = _model_graph(p, reference_mb, cal.input_bytes)

    def duration(task: Task) -> float:
        if task.kind is TaskKind.ALIGN:
            return cal.align_s / p
        if task.kind is TaskKind.DISPATCH:
            # every dispatch task scans all reads against one filter
            return cal.dispatch_s
        return cal.merge_s

    def calls(task: Task) -> TaskOutcome:
        share = cal.input_bytes // p if task.kind is TaskKind.ALIGN else cal.input_bytes
        return TaskOutcome(n_ecalls=1, n_ocalls=io_ocalls(share))

    result = simulate(
        graph,
        duration,
        secure_workers=secure_workers or p,
        nonsecure_workers=1,
        profile=profile,
        calls=calls,
    )
    return result.makespan


def model_rows(
    cal: Calibration,
    partitions: Sequence[int],
    profile: EnclaveProfile,
    reference_mb: float = DEFAULT_REFERENCE_MB,
    secure_workers: Optional[int] = None,
) -> List[BenchRow]:
    baseline = modeled_baseline(cal, profile, reference_mb)
    rows = []
    for p in partitions:
        parallel = modeled_parallel(cal, p, profile, reference_mb, secure_workers)
        rows.append(
            BenchRow(
                partitions=p,
                measured_wall_s=None,
                baseline_s=baseline,
                parallel_s=parallel,
                speedup=baseline / parallel if parallel else float('inf'),
                nonsecure_parallel_s=modeled_parallel(
                    cal, p, None, reference_mb, secure_workers
                ),
            )
        )
    return rows


Runner = Callable[[int], PipelineResult]


def run_bench(
    partitions: Sequence[int],
    run_at: Runner,
    profile: EnclaveProfile,
    *,
    reference_mb: float = DEFAULT_REFERENCE_MB,
    secure_workers: Optional[int] = None,
) -> List[BenchRow]:
    """Calibrate at p=1, then run and model every requested partition count.

    ``run_at(p)`` must run the whole pipeline at ``p`` partitions.
    """
    if not partitions:
        raise ValueError('partition list is empty')
    calibration_run = run_at(1)
    cal = Calibration.from_report(calibration_run.report, calibration_run.input_bytes)
    logger.info(
        'calibration: dispatch %.3fs align %.3fs merge %.3fs',
        cal.dispatch_s,
        cal.align_s,
        cal.merge_s,
    )
    rows = model_rows(cal, partitions, profile, reference_mb, secure_workers)
    for row in rows:
        result = calibration_run if row.partitions == 1 else run_at(row.partitions)
        row.measured_wall_s = result.report.measured_wall_s
        logger.info(
            'p=%s measured %.3fs modeled speedup %.2f',
            row.partitions,
            row.measured_wall_s,
            row.speedup,
        )
    return rows


@dataclass
class SealTiming:
    bytes: int
    seal_s: float
    unseal_s: float


def seal_timing(vault: SealVault, data: bytes, policy: KeyPolicy) -> SealTiming:
    started = time.perf_counter()
    blob = vault.seal(data, policy)
    sealed = time.perf_counter()
    vault.unseal(blob, policy)
    return SealTiming(len(data), sealed - started, time.perf_counter() - sealed)


def write_bench_csv(
    rows: Sequence[BenchRow],
    path: Union[str, Path],
    seal: Optional[SealTiming] = None,
) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    columns = [f.name for f in fields(BenchRow)]
    with open(target, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            values = asdict(row)
            writer.writerow(
                {
                    k: ('' if v is None else f'{v:.6f}' if isinstance(v, float) else v)
                    for k, v in values.items()
                }
            )
    if seal is not None:
        with open(target.with_name(target.stem + '_seal.csv'), 'w', newline='') as fh:
            writer = csv.DictWriter(fh, fieldnames=['bytes', 'seal_s', 'unseal_s'])
            writer.writeheader()
            writer.writerow(asdict(seal))
    return target
