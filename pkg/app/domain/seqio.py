"""FASTA / FASTQ / SAM subset used by the pipeline.

Parsers accept either ``bytes`` or a binary file object and reject malformed
input instead of repairing it. Sequences are case-folded to upper case and
restricted to ``ACGTN``; quality strings are carried through untouched.
"""

import io
import re
from typing import BinaryIO, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from app.domain.errors import MalformedFasta, MalformedFastq, MalformedSam
from app.domain.models import Mate, ReadRecord, ReferenceGenome, SamRecord

Source = Union[bytes, bytearray, BinaryIO]

ALPHABET = b'ACGTN'
SAM_VERSION = '1.6'

_MATE_SUFFIX_RE = re.compile(r'/([12])$')
_AS_TAG_RE = re.compile(rb'^AS:i:(-?\d+)$')


def _stream(source: Source) -> BinaryIO:
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(bytes(source))
    return source


def _lines(source: Source) -> Iterator[bytes]:
    for raw in _stream(source):
        yield raw.rstrip(b'\r\n')


def normalize_sequence(raw: bytes) -> Optional[bytes]:
    """Upper-case ``raw``; ``None`` when it holds anything outside ``ACGTN``."""
    seq = raw.upper()
    if seq.translate(None, ALPHABET):
        return None
    return seq


def _header_name(line: bytes, error: type, lineno: int) -> str:
    """First word after the leading marker byte, empty when there is none."""
    words = line[1:].split(maxsplit=1)
    if not words:
        return ''
    try:
        return words[0].decode()
    except UnicodeDecodeError:
        raise error(f'line {lineno}: header is not valid UTF-8')


# ----- FASTA -----
def parse_fasta(source: Source) -> ReferenceGenome:
    name: Optional[str] = None
    chunks: List[bytes] = []

    for lineno, line in enumerate(_lines(source), start=1):
        if not line:
            continue
        if line.startswith(b'>'):
            if name is not None:
                raise MalformedFasta(
                    f'line {lineno}: multi-record FASTA is not supported, '
                    'the reference must be a single sequence'
                )
            name = _header_name(line, MalformedFasta, lineno)
            if not name:
                raise MalformedFasta(f'line {lineno}: empty FASTA header')
            continue
        if name is None:
            raise MalformedFasta('FASTA input must begin with a ">" header line')
        seq = normalize_sequence(line.strip())
        if seq is None:
            raise MalformedFasta(f'line {lineno}: illegal character in sequence')
        chunks.append(seq)

    if name is None:
        raise MalformedFasta('FASTA input must begin with a ">" header line')
    sequence = b''.join(chunks)
    if not sequence:
        raise MalformedFasta(f'reference {name} has an empty sequence')
    return ReferenceGenome(name=name, sequence=sequence)


def write_fasta(name: str, sequence: bytes, width: int = 80) -> bytes:
    out = [b'>' + name.encode() + b'\n']
    for i in range(0, len(sequence), width):
        out.append(sequence[i : i + width] + b'\n')
    return b''.join(out)


# ----- FASTQ -----
def parse_fastq(
    source: Source, *, mate: Optional[Mate] = None, interleaved: bool = False
) -> Iterator[ReadRecord]:
    """Stream 4-line FASTQ records in file order.

    ``mate`` tags every record of a single mate file. ``interleaved`` reads
    the ``/1`` and ``/2`` id suffixes written by :func:`write_fastq` back into
    mate tags.
    """
    lines = _lines(source)
    lineno = 0
    while True:
        header = next(lines, None)
        lineno += 1
        if header is None:
            return
        if not header:
            # trailing blank lines are tolerated, nothing may follow them
            if any(rest for rest in lines):
                raise MalformedFastq(f'line {lineno}: blank line inside FASTQ')
            return
        if not header.startswith(b'@'):
            raise MalformedFastq(f'line {lineno}: record header must start with "@"')
        seq_line = next(lines, None)
        plus = next(lines, None)
        qual = next(lines, None)
        if seq_line is None or plus is None or qual is None:
            raise MalformedFastq(f'line {lineno}: truncated FASTQ record')
        if not plus.startswith(b'+'):
            raise MalformedFastq(
                f'line {lineno + 2}: separator line must start with "+"'
            )

        read_id = _header_name(header, MalformedFastq, lineno)
        record_mate = mate
        if interleaved:
            m = _MATE_SUFFIX_RE.search(read_id)
            if m:
                record_mate = Mate.FIRST if m.group(1) == '1' else Mate.SECOND
                read_id = read_id[: m.start()]
        if not read_id:
            raise MalformedFastq(f'line {lineno}: empty read id')

        seq = normalize_sequence(seq_line)
        if seq is None:
            raise MalformedFastq(
                f'line {lineno + 1}: illegal character in read {read_id}'
            )
        if len(qual) != len(seq):
            raise MalformedFastq(
                f'line {lineno + 3}: read {read_id} has {len(seq)} bases '
                f'but {len(qual)} quality values'
            )
        yield ReadRecord(id=read_id, sequence=seq, quality=qual, mate=record_mate)
        lineno += 3


def write_fastq(records: Iterable[ReadRecord]) -> bytes:
    out = []
    for r in records:
        rid = r.id + (r.mate.suffix if r.mate else '')
        out.append(b'@%s\n%s\n+\n%s\n' % (rid.encode(), r.sequence, r.quality))
    return b''.join(out)


def pair_reads(
    first: Iterable[ReadRecord], second: Iterable[ReadRecord]
) -> Iterator[Tuple[ReadRecord, ReadRecord]]:
    """Zip two mate files, checking ids agree and neither file runs short."""
    _missing = object()
    it1, it2 = iter(first), iter(second)
    while True:
        a = next(it1, _missing)
        b = next(it2, _missing)
        if a is _missing and b is _missing:
            return
        if a is _missing or b is _missing:
            raise MalformedFastq('mate files contain a different number of reads')
        if a.id != b.id:
            raise MalformedFastq(f'mate ids differ: {a.id} vs {b.id}')
        yield (
            ReadRecord(a.id, a.sequence, a.quality, Mate.FIRST),
            ReadRecord(b.id, b.sequence, b.quality, Mate.SECOND),
        )


# ----- SAM -----
def write_sam(
    records: Iterable[SamRecord], header_segments: Sequence[Tuple[str, int]]
) -> bytes:
    out = [f'@HD\tVN:{SAM_VERSION}\tSO:unsorted\n'.encode()]
    for name, length in header_segments:
        out.append(f'@SQ\tSN:{name}\tLN:{length}\n'.encode())
    for r in records:
        fields = [
            r.qname.encode(),
            str(r.flag).encode(),
            r.rname.encode(),
            str(r.pos).encode(),
            str(r.mapq).encode(),
            r.cigar.encode(),
            r.rnext.encode(),
            str(r.pnext).encode(),
            str(r.tlen).encode(),
            r.seq or b'*',
            r.qual or b'*',
        ]
        if r.score_tag is not None:
            fields.append(f'AS:i:{r.score_tag}'.encode())
        out.append(b'\t'.join(fields) + b'\n')
    return b''.join(out)


def parse_sam(source: Source) -> Iterator[SamRecord]:
    for lineno, line in enumerate(_lines(source), start=1):
        if not line or line.startswith(b'@'):
            continue
        cols = line.split(b'\t')
        if len(cols) < 11:
            raise MalformedSam(f'line {lineno}: expected 11 columns, got {len(cols)}')
        score = None
        for tag in cols[11:]:
            m = _AS_TAG_RE.match(tag)
            if m:
                score = int(m.group(1))
        try:
            record = SamRecord(
                qname=cols[0].decode(),
                flag=int(cols[1]),
                rname=cols[2].decode(),
                pos=int(cols[3]),
                mapq=int(cols[4]),
                cigar=cols[5].decode(),
                rnext=cols[6].decode(),
                pnext=int(cols[7]),
                tlen=int(cols[8]),
                seq=b'' if cols[9] == b'*' else cols[9],
                qual=b'' if cols[10] == b'*' else cols[10],
                score_tag=score,
            )
        except ValueError as e:
            raise MalformedSam(f'line {lineno}: {e}')
        yield record
