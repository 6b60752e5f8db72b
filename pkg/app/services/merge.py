import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from app.domain.errors import ConflictingDuplicates, MissingRoot, SealFailure
from app.domain.models import (
    FLAG_FIRST,
    FLAG_MATE_UNMAPPED,
    FLAG_PAIRED,
    FLAG_SECOND,
    FLAG_UNMAPPED,
    UNAVAILABLE_MAPQ,
    AlignmentRecord,
    Mate,
    ReadRecord,
    SamRecord,
)
from app.domain.seqio import write_sam
from app.services.sealvault import KeyPolicy, SealedBlob, SealVault

logger = logging.getLogger(__name__)

PartitionResults = Tuple[int, Iterable[AlignmentRecord]]


def _outranks(a: AlignmentRecord, b: AlignmentRecord) -> bool:
    """Higher score, then smaller global_pos, then smaller partition id."""
    return (-a.score, a.global_pos, a.partition_id) < (
        -b.score,
        b.global_pos,
        b.partition_id,
    )


def select_best(
    per_partition: Iterable[PartitionResults],
) -> Dict[tuple, AlignmentRecord]:
    """Best mapped record per read (per mate for pairs) across partitions.

    The ranking is a total order, so the result does not depend on the order
    partitions arrive in.
    """
    best: Dict[tuple, AlignmentRecord] = {}
    scores: Dict[tuple, int] = {}
    for partition_id, records in per_partition:
        for rec in records:
            if rec.partition_id != partition_id:
                raise ConflictingDuplicates(
                    f'record for {rec.read_id} claims partition {rec.partition_id}',
                    stage='merge',
                    partition_id=partition_id,
                )
            if not rec.mapped:
                continue
            at = (rec.key, rec.global_pos)
            known = scores.setdefault(at, rec.score)
            if known != rec.score:
                raise ConflictingDuplicates(
                    f'read {rec.read_id} aligned at {rec.global_pos} with scores '
                    f'{known} and {rec.score}',
                    stage='merge',
                    partition_id=partition_id,
                )
            current = best.get(rec.key)
            if current is None or _outranks(rec, current):
                best[rec.key] = rec
    return best


def _pair_flags(mate: Optional[Mate], mate_mapped: bool) -> int:
    if mate is None:
        return 0
    flag = FLAG_PAIRED | (FLAG_FIRST if mate is Mate.FIRST else FLAG_SECOND)
    if not mate_mapped:
        flag |= FLAG_MATE_UNMAPPED
    return flag


def _other(mate: Optional[Mate]) -> Optional[Mate]:
    if mate is None:
        return None
    return Mate.SECOND if mate is Mate.FIRST else Mate.FIRST


def merge(
    per_partition: Iterable[PartitionResults],
    reads: Sequence[ReadRecord],
    reference_name: str,
) -> List[SamRecord]:
    """One SAM record per input read, in input order.

    Reads never mapped (including reads dispatched to no partition) come out
    as unmapped records carrying their original SEQ and QUAL.
    """
    best = select_best(per_partition)
    out: List[SamRecord] = []
    emitted = set()
    for read in reads:
        if read.key in emitted:
            continue
        emitted.add(read.key)
        hit = best.get(read.key)
        mate_key = (read.id, _other(read.mate).value) if read.mate else None
        mate_hit = best.get(mate_key) if mate_key else None
        flag = _pair_flags(read.mate, mate_hit is not None)
        if hit is None:
            out.append(
                SamRecord(
                    qname=read.id,
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
                qname=read.id,
                flag=flag,
                rname=reference_name,
                pos=hit.global_pos,
                mapq=UNAVAILABLE_MAPQ,
                cigar=hit.cigar,
                seq=read.sequence,
                qual=read.quality,
                score_tag=hit.score,
                rnext='=' if mate_hit else '*',
                pnext=mate_hit.global_pos if mate_hit else 0,
            )
        )

    orphans = set(best) - emitted
    if orphans:
        logger.warning('merge: dropped %s alignments for unknown reads', len(orphans))
    mapped = sum(1 for r in out if not r.unmapped)
    logger.info('merge: %s records, %s mapped', len(out), mapped)
    return out


def finalize(
    records: Sequence[SamRecord],
    vault: SealVault,
    header_segments: Sequence[Tuple[str, int]],
) -> SealedBlob:
    """SAM bytes sealed for the user."""
    try:
        return vault.seal(write_sam(records, header_segments), KeyPolicy.user_key())
    except MissingRoot as e:
        raise SealFailure(f'cannot seal final output: {e.message}', stage='merge')


def finalize_file(
    records: Sequence[SamRecord],
    vault: SealVault,
    header_segments: Sequence[Tuple[str, int]],
    target: Path,
) -> Path:
    try:
        return vault.seal_file(
            target, KeyPolicy.user_key(), write_sam(records, header_segments)
        )
    except MissingRoot as e:
        raise SealFailure(
            f'cannot seal final output: {e.message}', stage='merge', path=str(target)
        )
