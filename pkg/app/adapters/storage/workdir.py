"""Work-directory layout shared by every stage.

::

    <root>/partitions/manifest.json, part_<i>.fa
    <root>/index/part_<i>.idx
    <root>/bloom/<fingerprint>_part_<i>.hsbf
    <root>/input/reads.fq.sealed
    <root>/dispatched/part_<i>.fq.sealed
    <root>/sam/part_<i>.sam.sealed
    <root>/final/output.sam.sealed

Partitions, indexes and filters are public reference material and are
stored in the clear; everything under input/, dispatched/, sam/ and
final/ is sealed.
"""

import logging
import struct
from array import array
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ValidationError

from app.domain.digest import sequence_digest
from app.domain.errors import IndexSegmentMismatch, MalformedInput
from app.domain.models import KmerIndex, ReferenceSegment
from app.domain.seqio import parse_fasta, write_fasta

logger = logging.getLogger(__name__)

INDEX_MAGIC = b'HSIX'
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct('<4sHII32sI')
_POSTING_COUNT = struct.Struct('<I')


class SegmentEntry(BaseModel):
    partition_id: int
    global_offset: int
    core_length: int
    overlap: int
    length: int
    digest: str


class PartitionManifest(BaseModel):
    reference_name: str
    reference_digest: str
    reference_length: int
    partitions: int
    overlap: int
    segments: List[SegmentEntry]

    @property
    def reference_id(self) -> str:
        """Names the partitioned reference; Bloom fingerprints build on it."""
        return f'{self.reference_digest}:p={self.partitions}:o={self.overlap}'

    def matches(self, reference_digest: str, partitions: int, overlap: int) -> bool:
        return (
            self.reference_digest == reference_digest
            and self.partitions == partitions
            and self.overlap == overlap
        )

    @classmethod
    def describe(
        cls, name: str, reference: bytes, overlap: int, segments: List[ReferenceSegment]
    ) -> 'PartitionManifest':
        return cls(
            reference_name=name,
            reference_digest=sequence_digest(reference).hex(),
            reference_length=len(reference),
            partitions=len(segments),
            overlap=overlap,
            segments=[
                SegmentEntry(
                    partition_id=s.partition_id,
                    global_offset=s.global_offset,
                    core_length=s.core_length,
                    overlap=s.overlap,
                    length=s.length,
                    digest=sequence_digest(s.sequence).hex(),
                )
                for s in segments
            ],
        )


class WorkDir:
    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)

    # directories
    @property
    def partitions_dir(self) -> Path:
        return self.root / 'partitions'

    @property
    def index_dir(self) -> Path:
        return self.root / 'index'

    @property
    def bloom_dir(self) -> Path:
        return self.root / 'bloom'

    @property
    def input_dir(self) -> Path:
        return self.root / 'input'

    @property
    def dispatched_dir(self) -> Path:
        return self.root / 'dispatched'

    @property
    def sam_dir(self) -> Path:
        return self.root / 'sam'

    @property
    def final_dir(self) -> Path:
        return self.root / 'final'

    def ensure(self) -> 'WorkDir':
        for d in (
            self.partitions_dir,
            self.index_dir,
            self.bloom_dir,
            self.input_dir,
            self.dispatched_dir,
            self.sam_dir,
            self.final_dir,
        ):
            d.mkdir(parents=True, exist_ok=True)
        return self

    # files
    @property
    def manifest_path(self) -> Path:
        return self.partitions_dir / 'manifest.json'

    def segment_path(self, partition_id: int) -> Path:
        return self.partitions_dir / f'part_{partition_id}.fa'

    def index_path(self, partition_id: int) -> Path:
        return self.index_dir / f'part_{partition_id}.idx'

    def bloom_path(self, fingerprint: bytes, partition_id: int) -> Path:
        return self.bloom_dir / f'{fingerprint.hex()[:16]}_part_{partition_id}.hsbf'

    @property
    def sealed_input_path(self) -> Path:
        return self.input_dir / 'reads.fq.sealed'

    def dispatched_path(self, partition_id: int) -> Path:
        return self.dispatched_dir / f'part_{partition_id}.fq.sealed'

    def sam_path(self, partition_id: int) -> Path:
        return self.sam_dir / f'part_{partition_id}.sam.sealed'

    @property
    def final_path(self) -> Path:
        return self.final_dir / 'output.sam.sealed'

    # manifest
    def load_manifest(self) -> Optional[PartitionManifest]:
        try:
            return PartitionManifest.model_validate_json(
                self.manifest_path.read_text()
            )
        except FileNotFoundError:
            return None
        except ValidationError:
            logger.warning('ignoring unreadable manifest %s', self.manifest_path)
            return None

    def save_manifest(self, manifest: PartitionManifest) -> None:
        self.partitions_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(manifest.model_dump_json(indent=2))

    # segments
    def save_segment(self, segment: ReferenceSegment) -> Path:
        path = self.segment_path(segment.partition_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_fasta(segment.name, segment.sequence))
        return path

    def load_segment(self, entry: SegmentEntry) -> ReferenceSegment:
        path = self.segment_path(entry.partition_id)
        try:
            genome = parse_fasta(path.read_bytes())
        except FileNotFoundError:
            raise MalformedInput(
                'partition file is missing',
                stage='partition',
                partition_id=entry.partition_id,
                path=str(path),
            )
        if sequence_digest(genome.sequence).hex() != entry.digest:
            raise IndexSegmentMismatch(
                'partition file does not match the manifest',
                stage='partition',
                partition_id=entry.partition_id,
                path=str(path),
            )
        return ReferenceSegment(
            partition_id=entry.partition_id,
            sequence=genome.sequence,
            global_offset=entry.global_offset,
            core_length=entry.core_length,
            overlap=entry.overlap,
        )

    def segments_cached(self, manifest: PartitionManifest) -> bool:
        return all(
            self.segment_path(e.partition_id).exists() for e in manifest.segments
        )

    # indexes
    def index_cached(self, entry: SegmentEntry, seed_length: int) -> bool:
        path = self.index_path(entry.partition_id)
        try:
            with open(path, 'rb') as fh:
                header = fh.read(_INDEX_HEADER.size)
        except FileNotFoundError:
            return False
        if len(header) != _INDEX_HEADER.size:
            return False
        magic, version, pid, s, digest, _ = _INDEX_HEADER.unpack(header)
        return (
            magic == INDEX_MAGIC
            and version == INDEX_VERSION
            and pid == entry.partition_id
            and s == seed_length
            and digest.hex() == entry.digest
        )

    def save_index(self, index: KmerIndex) -> Path:
        path = self.index_path(index.partition_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_index(index))
        return path

    def load_index(self, segment: ReferenceSegment) -> KmerIndex:
        path = self.index_path(segment.partition_id)
        try:
            index = decode_index(path.read_bytes())
        except (FileNotFoundError, MalformedInput) as e:
            raise IndexSegmentMismatch(
                f'index unavailable: {e}',
                stage='align',
                partition_id=segment.partition_id,
                path=str(path),
            )
        if index.segment_digest != sequence_digest(segment.sequence):
            raise IndexSegmentMismatch(
                'index was built over a different segment',
                stage='align',
                partition_id=segment.partition_id,
                path=str(path),
            )
        return index

    # filters
    def blooms_cached(self, fingerprint: bytes, partitions: int) -> bool:
        return all(
            self.bloom_path(fingerprint, i).exists() for i in range(partitions)
        )

    def prune_blooms(self, fingerprint: bytes, partitions: int) -> List[Path]:
        """Delete filter files other than the current set; returns what went."""
        keep = {self.bloom_path(fingerprint, i) for i in range(partitions)}
        removed = []
        for path in sorted(self.bloom_dir.glob('*.hsbf')):
            if path not in keep:
                path.unlink()
                removed.append(path)
        if removed:
            logger.info('removed %s stale bloom filter files', len(removed))
        return removed


def encode_index(index: KmerIndex) -> bytes:
    out = [
        _INDEX_HEADER.pack(
            INDEX_MAGIC,
            INDEX_VERSION,
            index.partition_id,
            index.seed_length,
            index.segment_digest,
            len(index.postings),
        )
    ]
    for kmer in sorted(index.postings):
        positions = index.postings[kmer]
        out.append(kmer)
        out.append(_POSTING_COUNT.pack(len(positions)))
        out.append(array('I', positions).tobytes())
    return b''.join(out)


def decode_index(data: bytes) -> KmerIndex:
    if len(data) < _INDEX_HEADER.size:
        raise MalformedInput('index file is truncated')
    magic, version, pid, s, digest, n = _INDEX_HEADER.unpack_from(data)
    if magic != INDEX_MAGIC or version != INDEX_VERSION:
        raise MalformedInput('not an index file')
    view = memoryview(data)
    at = _INDEX_HEADER.size
    postings = {}
    try:
        for _ in range(n):
            kmer = bytes(view[at : at + s])
            at += s
            (count,) = _POSTING_COUNT.unpack_from(data, at)
            at += _POSTING_COUNT.size
            positions = array('I')
            positions.frombytes(view[at : at + 4 * count])
            at += 4 * count
            postings[kmer] = positions.tolist()
    except (struct.error, ValueError):
        raise MalformedInput('index file is truncated')
    if at != len(data):
        raise MalformedInput('index file has trailing bytes')
    return KmerIndex(
        partition_id=pid, seed_length=s, segment_digest=digest, postings=postings
    )
