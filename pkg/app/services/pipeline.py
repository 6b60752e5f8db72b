"""Stage bodies and the end-to-end driver.

Every stage reads its inputs from the work directory and writes its outputs
back there, so a stage can run in any worker process. Reads only ever touch
disk sealed: the user's input under the user key, dispatched subsets and
per-partition SAM under the shared signer policy, the final SAM under the
user key again.
"""

import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.adapters.aligner.constants import (
    DEFAULT_MAX_SEED_OCCURRENCES,
    EXTERNAL_TIMEOUT_S,
    AlignerKind,
)
from app.adapters.aligner.external import ExternalAligner
from app.adapters.aligner.seed_extend import SeedExtendAligner
from app.adapters.storage.workdir import PartitionManifest, SegmentEntry, WorkDir
from app.domain.bloom import (
    DEFAULT_BITS_PER_ELEMENT,
    DEFAULT_HASHES,
    DEFAULT_SEED,
    BloomFilter,
    params_fingerprint,
)
from app.domain.digest import sequence_digest
from app.domain.errors import ConfigError, DomainError, MalformedSam
from app.domain.models import (
    FLAG_FIRST,
    FLAG_PAIRED,
    FLAG_SECOND,
    FLAG_UNMAPPED,
    UNAVAILABLE_MAPQ,
    AlignmentRecord,
    DispatchParams,
    Mate,
    ReadRecord,
    ReferenceGenome,
    ReferenceSegment,
    SamRecord,
    ScoringScheme,
)
from app.domain.ports.aligner import AlignerPort
from app.domain.seqio import (
    parse_fasta,
    parse_fastq,
    parse_sam,
    pair_reads,
    write_fastq,
    write_sam,
)
from app.services.cost_model import EnclaveProfile, io_ocalls
from app.services.dispatch import (
    DispatchSummary,
    count_undispatched,
    dispatch,
    dispatch_pairs,
)
from app.services.merge import finalize_file, merge
from app.services.refprep import (
    DEFAULT_SEED_LENGTH,
    build_index,
    filter_bits,
    generate_bloom_filters,
    partition_reference,
)
from app.services.scheduler import (
    CacheState,
    ExecutorKind,
    RunReport,
    Task,
    TaskKind,
    TaskOutcome,
    build_task_graph,
    execute,
)
from app.services.sealvault import KeyPolicy, SealVault, signer_id_for

logger = logging.getLogger(__name__)


class StageContext(BaseModel):
    """Everything a stage needs, small enough to ship to a worker process."""

    model_config = ConfigDict(frozen=True)

    workdir: Path
    reference: Path
    partitions: int = Field(1, ge=1)
    overlap: int = Field(99, ge=0)
    dispatch: DispatchParams = DispatchParams()
    seed_length: int = Field(DEFAULT_SEED_LENGTH, ge=1)
    bloom_bits: Optional[int] = Field(None, ge=1)
    bloom_hashes: int = Field(DEFAULT_HASHES, ge=1)
    bloom_seed: int = DEFAULT_SEED
    bits_per_element: int = Field(DEFAULT_BITS_PER_ELEMENT, ge=1)
    scoring: ScoringScheme = ScoringScheme()
    max_seed_occurrences: int = Field(DEFAULT_MAX_SEED_OCCURRENCES, ge=1)
    aligner: AlignerKind = AlignerKind.BUILTIN
    aligner_cmd: Optional[str] = None
    aligner_timeout: float = Field(EXTERNAL_TIMEOUT_S, gt=0)
    paired: bool = False
    signer_name: str = 'sealmap'
    signer_version: int = Field(1, ge=0)
    seal_chunk_size: int = Field(1 << 20, ge=1)
    root_key: Optional[bytes] = Field(None, repr=False)
    user_key: Optional[bytes] = Field(None, repr=False)

    @property
    def work(self) -> WorkDir:
        return WorkDir(self.workdir)

    @property
    def vault(self) -> SealVault:
        return SealVault(self.root_key, self.user_key, chunk_size=self.seal_chunk_size)

    @property
    def intermediate_policy(self) -> KeyPolicy:
        return KeyPolicy.signing_identity(
            signer_id_for(self.signer_name), self.signer_version
        )

    def build_aligner(self) -> AlignerPort:
        if self.aligner is AlignerKind.EXTERNAL:
            if not self.aligner_cmd:
                raise ConfigError(
                    '--aligner external needs --aligner-cmd', stage='align'
                )
            return ExternalAligner(self.aligner_cmd, timeout=self.aligner_timeout)
        return SeedExtendAligner(self.scoring, self.max_seed_occurrences)


# ----- helpers -----
def load_reference(path: Path) -> ReferenceGenome:
    try:
        with open(path, 'rb') as fh:
            return parse_fasta(fh)
    except FileNotFoundError:
        raise ConfigError('reference file not found', stage='partition', path=str(path))
    except DomainError as e:
        raise e.attribute(stage='partition', path=str(path))


def _manifest(ctx: StageContext) -> PartitionManifest:
    manifest = ctx.work.load_manifest()
    if manifest is None:
        raise ConfigError(
            'reference has not been partitioned',
            stage='partition',
            path=str(ctx.work.manifest_path),
        )
    return manifest


def _entry(manifest: PartitionManifest, partition_id: int) -> SegmentEntry:
    return manifest.segments[partition_id]


def expected_fingerprint(ctx: StageContext, manifest: PartitionManifest) -> bytes:
    bits = filter_bits(
        [e.length for e in manifest.segments],
        ctx.dispatch,
        ctx.bloom_bits,
        ctx.bits_per_element,
    )
    return params_fingerprint(
        manifest.reference_id, ctx.dispatch.b, ctx.dispatch.l, bits, ctx.bloom_hashes
    )


def _read_input(ctx: StageContext) -> Tuple[List[ReadRecord], int]:
    """Unsealed input reads and the sealed size read to get them."""
    path = ctx.work.sealed_input_path
    data = ctx.vault.unseal_file(path, KeyPolicy.user_key())
    reads = list(parse_fastq(data, interleaved=ctx.paired))
    return reads, path.stat().st_size


def _pairs(reads: Sequence[ReadRecord]) -> Iterator[Tuple[ReadRecord, ReadRecord]]:
    return zip(reads[0::2], reads[1::2])


# ----- partition-level SAM -----
def encode_partition_sam(
    records: Sequence[AlignmentRecord],
    reads: Sequence[ReadRecord],
    segment: ReferenceSegment,
) -> bytes:
    """Per-partition SAM in segment coordinates (rname ``part_<i>``)."""
    by_key = {r.key: r for r in reads}
    out = []
    for rec in records:
        read = by_key.get(rec.key)
        if read is None:
            logger.warning(
                'partition %s: aligner reported unknown read %s',
                segment.partition_id,
                rec.read_id,
            )
            continue
        flag = 0
        if rec.mate is not None:
            mate_flag = FLAG_FIRST if rec.mate is Mate.FIRST else FLAG_SECOND
            flag |= FLAG_PAIRED | mate_flag
        if not rec.mapped:
            out.append(
                SamRecord(
                    qname=rec.read_id,
                    flag=flag | FLAG_UNMAPPED,
                    rname='*',
                    pos=0,
                    mapq=0,
                    cigar='*',
                    seq=read.sequence,
                    qual=read.quality,
                )
            )
            continue
        out.append(
            SamRecord(
                qname=rec.read_id,
                flag=flag,
                rname=segment.name,
                pos=rec.segment_pos + 1,
                mapq=UNAVAILABLE_MAPQ,
                cigar=rec.cigar,
                seq=read.sequence,
                qual=read.quality,
                score_tag=rec.score,
            )
        )
    return write_sam(out, [(segment.name, segment.length)])


def decode_partition_sam(data: bytes, entry: SegmentEntry) -> List[AlignmentRecord]:
    records = []
    for sam in parse_sam(data):
        mate = None
        if sam.flag & FLAG_PAIRED:
            mate = Mate.FIRST if sam.flag & FLAG_FIRST else Mate.SECOND
        if sam.unmapped:
            records.append(
                AlignmentRecord.unmapped(sam.qname, entry.partition_id, mate)
            )
            continue
        if sam.score_tag is None:
            raise MalformedSam(
                f'record {sam.qname} has no AS:i score',
                stage='merge',
                partition_id=entry.partition_id,
            )
        if starts_in_overlap(entry, sam.pos - 1):
            records.append(
                AlignmentRecord.unmapped(sam.qname, entry.partition_id, mate)
            )
            continue
        records.append(
            AlignmentRecord(
                read_id=sam.qname,
                partition_id=entry.partition_id,
                segment_pos=sam.pos - 1,
                global_pos=sam.pos + entry.global_offset,
                score=sam.score_tag,
                cigar=sam.cigar,
                mapped=True,
                mate=mate,
            )
        )
    return records


def starts_in_overlap(entry: SegmentEntry, segment_pos: int) -> bool:
    """Hit begins past the core, where the next segment's core holds it whole.

    The copy seen here may be truncated or re-scored at the segment end, so
    only the next segment reports it.
    """
    return segment_pos >= entry.core_length


# ----- stage bodies -----
def _partition(ctx: StageContext, task: Task) -> TaskOutcome:
    genome = load_reference(ctx.reference)
    segments = partition_reference(genome, ctx.partitions, ctx.overlap)
    work = ctx.work
    for segment in segments:
        work.save_segment(segment)
    work.save_manifest(
        PartitionManifest.describe(genome.name, genome.sequence, ctx.overlap, segments)
    )
    logger.info(
        'partitioned %s (%s bases) into %s',
        genome.name,
        genome.length,
        len(segments),
    )
    return TaskOutcome(detail={'segments': len(segments)})


def _index(ctx: StageContext, task: Task) -> TaskOutcome:
    work = ctx.work
    segment = work.load_segment(_entry(_manifest(ctx), task.partition_id))
    index = build_index(segment, ctx.seed_length)
    work.save_index(index)
    return TaskOutcome(detail={'kmers': len(index.postings)})


def _bloom_build(ctx: StageContext, task: Task) -> TaskOutcome:
    work = ctx.work
    manifest = _manifest(ctx)
    segments = [work.load_segment(e) for e in manifest.segments]
    filters = generate_bloom_filters(
        segments,
        ctx.dispatch,
        ctx.bloom_bits,
        ctx.bloom_hashes,
        reference_id=manifest.reference_id,
        seed=ctx.bloom_seed,
        bits_per_element=ctx.bits_per_element,
    )
    work.bloom_dir.mkdir(parents=True, exist_ok=True)
    for bf in filters:
        bf.save(work.bloom_path(bf.params_fingerprint, bf.partition_id))
    work.prune_blooms(filters[0].params_fingerprint, len(filters))
    logger.info('built %s bloom filters of %s bits', len(filters), filters[0].m)
    return TaskOutcome(detail={'bits': filters[0].m})


def _dispatch(ctx: StageContext, task: Task) -> TaskOutcome:
    work = ctx.work
    manifest = _manifest(ctx)
    fingerprint = expected_fingerprint(ctx, manifest)
    bf = BloomFilter.load(work.bloom_path(fingerprint, task.partition_id), fingerprint)
    reads, sealed_in = _read_input(ctx)
    if ctx.paired:
        query = dispatch_pairs(bf, _pairs(reads), ctx.dispatch)
    else:
        query = dispatch(bf, reads, ctx.dispatch)
    out = write_fastq(query.reads)
    target = ctx.vault.seal_file(
        work.dispatched_path(task.partition_id), ctx.intermediate_policy, out
    )
    logger.info(
        'partition %s: dispatched %s of %s reads',
        task.partition_id,
        len(query.reads),
        len(reads),
    )
    return TaskOutcome(
        n_ecalls=1,
        n_ocalls=io_ocalls(sealed_in + target.stat().st_size),
        detail={'reads': len(reads), 'dispatched': len(query.reads)},
    )


def _align(ctx: StageContext, task: Task) -> TaskOutcome:
    work = ctx.work
    pid = task.partition_id
    segment = work.load_segment(_entry(_manifest(ctx), pid))
    index = work.load_index(segment)
    source = work.dispatched_path(pid)
    data = ctx.vault.unseal_file(source, ctx.intermediate_policy)
    reads = list(parse_fastq(data, interleaved=ctx.paired))
    records = ctx.build_aligner().align(segment, index, reads)
    target = ctx.vault.seal_file(
        work.sam_path(pid),
        ctx.intermediate_policy,
        encode_partition_sam(records, reads, segment),
    )
    return TaskOutcome(
        n_ecalls=1,
        n_ocalls=io_ocalls(source.stat().st_size + target.stat().st_size),
        detail={'reads': len(reads), 'mapped': sum(1 for r in records if r.mapped)},
    )


def _merge(ctx: StageContext, task: Task) -> TaskOutcome:
    work = ctx.work
    manifest = _manifest(ctx)
    reads, sealed_in = _read_input(ctx)
    read_bytes = [sealed_in]
    routed = set()

    def per_partition():
        for entry in manifest.segments:
            path = work.sam_path(entry.partition_id)
            read_bytes.append(path.stat().st_size)
            data = ctx.vault.unseal_file(path, ctx.intermediate_policy)
            decoded = decode_partition_sam(data, entry)
            routed.update(r.read_id for r in decoded)
            yield entry.partition_id, decoded

    records = merge(per_partition(), reads, manifest.reference_name)
    undispatched = count_undispatched(reads, routed)
    if undispatched:
        logger.info('%s of %s reads reached no partition', undispatched, len(reads))
    target = finalize_file(
        records,
        ctx.vault,
        [(manifest.reference_name, manifest.reference_length)],
        work.final_path,
    )
    mapped = sum(1 for r in records if not r.unmapped)
    return TaskOutcome(
        n_ecalls=1,
        n_ocalls=io_ocalls(sum(read_bytes) + target.stat().st_size),
        detail={
            'records': len(records),
            'mapped': mapped,
            'undispatched': undispatched,
        },
    )


_STAGES = {
    TaskKind.PARTITION: _partition,
    TaskKind.INDEX: _index,
    TaskKind.BLOOM_BUILD: _bloom_build,
    TaskKind.DISPATCH: _dispatch,
    TaskKind.ALIGN: _align,
    TaskKind.MERGE: _merge,
}


def run_stage(ctx: StageContext, task: Task) -> TaskOutcome:
    try:
        return _STAGES[task.kind](ctx, task)
    except DomainError as e:
        raise e.attribute(stage=task.kind.value, partition_id=task.partition_id)
    except OSError as e:
        raise ConfigError(
            f'{type(e).__name__}: {e.strerror or e}',
            stage=task.kind.value,
            partition_id=task.partition_id,
            path=e.filename,
        )


# ----- caching -----
def cache_state(ctx: StageContext) -> CacheState:
    work = ctx.work
    manifest = work.load_manifest()
    if manifest is None:
        return CacheState()
    genome = load_reference(ctx.reference)
    digest = sequence_digest(genome.sequence).hex()
    if not manifest.matches(digest, ctx.partitions, ctx.overlap) or not (
        work.segments_cached(manifest)
    ):
        return CacheState()
    return CacheState(
        partitions=True,
        indexes=all(work.index_cached(e, ctx.seed_length) for e in manifest.segments),
        blooms=work.blooms_cached(expected_fingerprint(ctx, manifest), ctx.partitions),
    )


PREPARE_KINDS = (TaskKind.PARTITION, TaskKind.INDEX, TaskKind.BLOOM_BUILD)


def prepare(ctx: StageContext) -> Dict[str, str]:
    """Build whatever reference material is missing; report built/cached per stage."""
    ctx.work.ensure()
    cache = cache_state(ctx)
    graph = build_task_graph(ctx.partitions, cache)
    status = {
        TaskKind.PARTITION.value: 'cached' if cache.partitions else 'built',
        TaskKind.INDEX.value: 'cached' if cache.indexes else 'built',
        TaskKind.BLOOM_BUILD.value: 'cached' if cache.blooms else 'built',
    }
    for task in graph.topological_order():
        if task.kind in PREPARE_KINDS:
            run_stage(ctx, task)
    for stage, state in status.items():
        logger.info('prepare %s: %s', stage, state)
    return status


# ----- end to end -----
def seal_input(
    ctx: StageContext, reads: Path, mates: Optional[Path] = None
) -> int:
    """Seal the user's plaintext reads (interleaving mates) into the work dir."""
    work = ctx.work
    try:
        with open(reads, 'rb') as fh:
            first = list(parse_fastq(fh))
        if mates is not None:
            with open(mates, 'rb') as fh:
                pairs = pair_reads(first, parse_fastq(fh))
                records = [r for pair in pairs for r in pair]
        else:
            records = first
    except FileNotFoundError as e:
        raise ConfigError('reads file not found', stage='dispatch', path=e.filename)
    except DomainError as e:
        raise e.attribute(stage='dispatch', path=str(reads))
    ctx.vault.seal_file(
        work.sealed_input_path, KeyPolicy.user_key(), write_fastq(records)
    )
    logger.info('sealed %s input reads', len(records))
    return len(records)


@dataclass
class PipelineResult:
    report: RunReport
    final_path: Path
    reads: int
    input_bytes: int = 0
    dispatch: DispatchSummary = field(default_factory=DispatchSummary)


def working_sets(ctx: StageContext, input_bytes: int) -> Dict[TaskKind, int]:
    """Declared per-task working sets in bytes, used only by the cost model."""
    manifest = ctx.work.load_manifest()
    largest = max((e.length for e in manifest.segments), default=0) if manifest else 0
    bloom = (ctx.bloom_bits or 0) // 8
    return {
        TaskKind.DISPATCH: input_bytes + bloom,
        TaskKind.ALIGN: largest + input_bytes,
        TaskKind.MERGE: input_bytes,
    }


async def run_pipeline(
    ctx: StageContext,
    reads: Path,
    mates: Optional[Path] = None,
    *,
    secure_workers: int = 1,
    nonsecure_workers: int = 1,
    profile: Optional[EnclaveProfile] = None,
    executor: ExecutorKind = ExecutorKind.PROCESS,
    report_path: Optional[Path] = None,
    secure: bool = True,
) -> PipelineResult:
    """Seal the reads, run the task graph and summarise the run.

    ``secure=False`` is the insecure baseline: every stage runs on one
    ordinary pool of ``secure_workers + nonsecure_workers`` workers and no
    enclave cost is charged.
    """
    if mates is not None and not ctx.paired:
        ctx = ctx.model_copy(update={'paired': True})
    ctx.work.ensure()
    n_reads = seal_input(ctx, reads, mates)
    input_bytes = ctx.work.sealed_input_path.stat().st_size
    graph = build_task_graph(
        ctx.partitions,
        cache_state(ctx),
        working_sets=working_sets(ctx, input_bytes),
        secure=secure,
    )
    if not secure:
        nonsecure_workers += secure_workers
        secure_workers, profile = 0, None
    report = await execute(
        graph,
        partial(run_stage, ctx),
        secure_workers=secure_workers,
        nonsecure_workers=nonsecure_workers,
        profile=profile,
        executor=executor,
    )

    summary = DispatchSummary(total_reads=n_reads)
    for t in report.stage(TaskKind.DISPATCH):
        summary.per_partition[t.partition_id] = t.outcome.detail.get('dispatched', 0)
    for t in report.stage(TaskKind.MERGE):
        summary.undispatched = t.outcome.detail.get('undispatched', 0)
    report.notes['mode'] = 'secure' if secure else 'insecure'
    report.notes['reads'] = str(n_reads)
    report.notes['dispatched'] = str(summary.dispatched_total)
    report.notes['reduction'] = f'{summary.reduction():.4f}'
    report.notes['undispatched'] = str(summary.undispatched)
    if report_path is not None:
        report.write_csv(report_path)
    logger.info(
        'pipeline finished: %s reads, %s partitions, %.3fs modeled',
        n_reads,
        ctx.partitions,
        report.total_s,
    )
    return PipelineResult(
        report=report,
        final_path=ctx.work.final_path,
        reads=n_reads,
        input_bytes=input_bytes,
        dispatch=summary,
    )


def read_final(ctx: StageContext, path: Optional[Path] = None) -> bytes:
    """Unsealed final SAM; raises if it does not authenticate."""
    return ctx.vault.unseal_file(path or ctx.work.final_path, KeyPolicy.user_key())

