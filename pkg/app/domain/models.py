from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.domain.errors import MalformedSam

UNMAPPED_SCORE = -(2**31)

# SAM flag bits
FLAG_PAIRED = 0x1
FLAG_UNMAPPED = 0x4
FLAG_MATE_UNMAPPED = 0x8
FLAG_FIRST = 0x40
FLAG_SECOND = 0x80

UNAVAILABLE_MAPQ = 255


class Mate(str, Enum):
    FIRST = 'first'
    SECOND = 'second'

    @property
    def suffix(self) -> str:
        return '/1' if self is Mate.FIRST else '/2'


# ----- Sequences -----
@dataclass(frozen=True)
class ReferenceGenome:
    name: str
    sequence: bytes

    @property
    def length(self) -> int:
        return len(self.sequence)


@dataclass(frozen=True)
class ReadRecord:
    id: str
    sequence: bytes
    quality: bytes
    mate: Optional[Mate] = None

    @property
    def key(self) -> tuple:
        return (self.id, self.mate.value if self.mate else '')


@dataclass(frozen=True)
class SamRecord:
    qname: str
    flag: int
    rname: str
    pos: int
    mapq: int
    cigar: str
    seq: bytes
    qual: bytes
    score_tag: Optional[int] = None
    rnext: str = '*'
    pnext: int = 0
    tlen: int = 0

    def __post_init__(self):
        # unmapped mates may carry the partner's rname and pos
        if self.unmapped:
            return
        if self.pos == 0 or self.cigar == '*' or self.rname == '*':
            raise MalformedSam(
                f'record {self.qname}: mapped record without rname, pos or cigar'
            )

    @property
    def unmapped(self) -> bool:
        return bool(self.flag & FLAG_UNMAPPED)


# ----- Reference preparation -----
@dataclass(frozen=True)
class ReferenceSegment:
    partition_id: int
    sequence: bytes
    global_offset: int
    core_length: int
    overlap: int

    @property
    def length(self) -> int:
        return len(self.sequence)

    @property
    def name(self) -> str:
        return f'part_{self.partition_id}'

    def core_contains(self, segment_pos: int) -> bool:
        return 0 <= segment_pos < self.core_length


@dataclass
class KmerIndex:
    partition_id: int
    seed_length: int
    segment_digest: bytes
    postings: Dict[bytes, List[int]] = field(default_factory=dict)

    def lookup(self, kmer: bytes) -> List[int]:
        return self.postings.get(kmer, [])


class DispatchParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    b: int = Field(25, ge=1)
    l: int = Field(15, ge=0)  # noqa: E741
    p: int = Field(1, ge=1)
    read_stride: Optional[int] = Field(None, ge=1)

    @model_validator(mode='after')
    def _check_overlap(self):
        if self.l >= self.b:
            raise ValueError('bmer overlap must be smaller than the bmer length')
        return self

    @property
    def stride(self) -> int:
        return self.b - self.l

    @property
    def effective_read_stride(self) -> int:
        return self.read_stride or self.stride


# ----- Dispatch -----
@dataclass(frozen=True)
class DispatchedQuery:
    partition_id: int
    reads: List[ReadRecord]


# ----- Alignment -----
@dataclass(frozen=True)
class AlignmentRecord:
    read_id: str
    partition_id: int
    segment_pos: int
    global_pos: int
    score: int
    cigar: str
    mapped: bool
    mate: Optional[Mate] = None

    @classmethod
    def unmapped(
        cls, read_id: str, partition_id: int, mate: Optional[Mate] = None
    ) -> 'AlignmentRecord':
        return cls(
            read_id=read_id,
            partition_id=partition_id,
            segment_pos=-1,
            global_pos=0,
            score=UNMAPPED_SCORE,
            cigar='*',
            mapped=False,
            mate=mate,
        )

    @property
    def key(self) -> tuple:
        return (self.read_id, self.mate.value if self.mate else '')


class ScoringScheme(BaseModel):
    model_config = ConfigDict(frozen=True)

    match: int = Field(1, gt=0)
    mismatch: int = Field(-4, le=0)
    gap_open: int = Field(-6, le=0)
    gap_extend: int = Field(-1, le=0)
    band_width: int = Field(15, ge=1)
    min_report_score: int = 30

    def gap(self, length: int) -> int:
        return self.gap_open + self.gap_extend * length
