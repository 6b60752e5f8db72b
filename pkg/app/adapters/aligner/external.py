import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Union

from app.adapters.aligner.constants import EXTERNAL_TIMEOUT_S
from app.domain.errors import ExternalToolFailure, MalformedSam
from app.domain.models import (
    FLAG_FIRST,
    FLAG_SECOND,
    AlignmentRecord,
    KmerIndex,
    Mate,
    ReadRecord,
    ReferenceSegment,
)
from app.domain.ports.aligner import AlignerPort
from app.domain.seqio import parse_sam, write_fasta, write_fastq

logger = logging.getLogger(__name__)

# secondary / supplementary alignments
_SKIPPED_FLAGS = 0x100 | 0x800


def _command(template: str, reference: Path, reads: Path) -> List[str]:
    argv = shlex.split(template)
    if not any('{reference}' in a for a in argv) or not any(
        '{reads}' in a for a in argv
    ):
        raise ExternalToolFailure(
            'aligner command must contain {reference} and {reads} placeholders',
            stage='align',
        )
    return [
        a.replace('{reference}', str(reference)).replace('{reads}', str(reads))
        for a in argv
    ]


def _mate(flag: int) -> Optional[Mate]:
    if flag & FLAG_FIRST:
        return Mate.FIRST
    if flag & FLAG_SECOND:
        return Mate.SECOND
    return None


def align_external(
    command_template: str,
    segment_file: Union[str, Path],
    reads_file: Union[str, Path],
    *,
    partition_id: int = 0,
    global_offset: int = 0,
    timeout: float = EXTERNAL_TIMEOUT_S,
) -> List[AlignmentRecord]:
    """Run an external aligner that prints SAM for one segment on stdout.

    Positions reported by the tool are 1-based in segment coordinates and
    are shifted by ``global_offset``. The tool's own AS:i score is kept;
    records without one are treated as unmapped.
    """
    argv = _command(command_template, Path(segment_file), Path(reads_file))
    logger.info('partition %s: running %s', partition_id, argv[0])
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout, check=False)
    except FileNotFoundError:
        raise ExternalToolFailure(
            f'aligner executable not found: {argv[0]}',
            stage='align',
            partition_id=partition_id,
        )
    except subprocess.TimeoutExpired:
        raise ExternalToolFailure(
            f'aligner timed out after {timeout:.0f}s',
            stage='align',
            partition_id=partition_id,
        )

    if proc.returncode != 0:
        stderr = proc.stderr.decode(errors='replace').strip()
        raise ExternalToolFailure(
            f'aligner exited with status {proc.returncode}: {stderr}',
            stage='align',
            partition_id=partition_id,
        )

    records = []
    try:
        for sam in parse_sam(proc.stdout):
            if sam.flag & _SKIPPED_FLAGS:
                continue
            mate = _mate(sam.flag)
            if sam.unmapped or sam.score_tag is None:
                records.append(AlignmentRecord.unmapped(sam.qname, partition_id, mate))
                continue
            records.append(
                AlignmentRecord(
                    read_id=sam.qname,
                    partition_id=partition_id,
                    segment_pos=sam.pos - 1,
                    global_pos=sam.pos + global_offset,
                    score=sam.score_tag,
                    cigar=sam.cigar,
                    mapped=True,
                    mate=mate,
                )
            )
    except MalformedSam as e:
        raise ExternalToolFailure(
            f'aligner produced unparseable SAM: {e.message}',
            stage='align',
            partition_id=partition_id,
        )
    return records


class ExternalAligner(AlignerPort):
    """Writes the segment and reads to a scratch directory and shells out."""

    def __init__(self, command_template: str, timeout: float = EXTERNAL_TIMEOUT_S):
        self.command_template = command_template
        self.timeout = timeout

    def align(
        self,
        segment: ReferenceSegment,
        index: KmerIndex,
        reads: Sequence[ReadRecord],
    ) -> List[AlignmentRecord]:
        # the tool builds its own index; ours is unused here
        with tempfile.TemporaryDirectory(prefix='sealmap-ext-') as scratch:
            ref_path = Path(scratch) / f'{segment.name}.fa'
            reads_path = Path(scratch) / 'reads.fq'
            ref_path.write_bytes(write_fasta(segment.name, segment.sequence))
            reads_path.write_bytes(write_fastq(reads))
            return align_external(
                self.command_template,
                ref_path,
                reads_path,
                partition_id=segment.partition_id,
                global_offset=segment.global_offset,
                timeout=self.timeout,
            )
