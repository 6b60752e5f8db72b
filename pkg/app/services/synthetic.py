"""Seeded synthetic genomes and planted reads for benches and tests."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.domain.models import Mate, ReadRecord, ReferenceGenome

_BASES = np.frombuffer(b'ACGT', dtype=np.uint8)


@dataclass(frozen=True)
class PlantedRead:
    read: ReadRecord
    # 0-based start in the genome
    origin: int
    substitutions: Tuple[int, ...] = ()


def random_genome(
    length: int, *, seed: int = 0, name: str = 'synthetic'
) -> ReferenceGenome:
    rng = np.random.default_rng(seed)
    seq = _BASES[rng.integers(0, 4, size=length)].tobytes()
    return ReferenceGenome(name=name, sequence=seq)


def _mutate(
    fragment: bytes,
    rng: np.random.Generator,
    count: int,
    margin: int,
) -> Tuple[bytes, Tuple[int, ...]]:
    if count == 0:
        return fragment, ()
    buf = bytearray(fragment)
    lo, hi = margin, len(buf) - margin
    picks = rng.choice(np.arange(lo, hi), count, replace=False)
    positions = sorted(int(p) for p in picks)
    for pos in positions:
        current = buf[pos]
        choices = [b for b in b'ACGT' if b != current]
        buf[pos] = choices[int(rng.integers(0, 3))]
    return bytes(buf), tuple(positions)


def plant_reads(
    genome: ReferenceGenome,
    n: int,
    read_length: int = 100,
    *,
    seed: int = 1,
    max_substitutions: int = 0,
    grid: int = 1,
    substitution_margin: int = 0,
    prefix: str = 'read',
) -> List[PlantedRead]:
    """``n`` reads copied from ``genome`` at starts that are multiples of ``grid``.

    Each read gets between 0 and ``max_substitutions`` base changes, kept at
    least ``substitution_margin`` bases away from either end.
    """
    rng = np.random.default_rng(seed)
    last = (genome.length - read_length) // grid
    if last < 0:
        raise ValueError('genome is shorter than one read')
    width = len(str(n - 1)) if n > 1 else 1
    planted = []
    for i in range(n):
        origin = int(rng.integers(0, last + 1)) * grid
        fragment = genome.sequence[origin : origin + read_length]
        count = int(rng.integers(0, max_substitutions + 1))
        seq, subs = _mutate(fragment, rng, count, substitution_margin)
        planted.append(
            PlantedRead(
                read=ReadRecord(
                    id=f'{prefix}{i:0{width}d}', sequence=seq, quality=b'I' * len(seq)
                ),
                origin=origin,
                substitutions=subs,
            )
        )
    return planted


def plant_pairs(
    genome: ReferenceGenome,
    n: int,
    read_length: int = 100,
    *,
    insert_size: int = 300,
    seed: int = 2,
    grid: int = 1,
    prefix: str = 'pair',
) -> List[Tuple[PlantedRead, PlantedRead]]:
    """Forward-strand mate pairs ``insert_size`` apart, both exact copies."""
    rng = np.random.default_rng(seed)
    span = insert_size + read_length
    last = (genome.length - span) // grid
    pairs = []
    for i in range(n):
        origin = int(rng.integers(0, last + 1)) * grid
        second_at = origin + insert_size
        reads = []
        for mate, at in ((Mate.FIRST, origin), (Mate.SECOND, second_at)):
            seq = genome.sequence[at : at + read_length]
            reads.append(
                PlantedRead(
                    ReadRecord(f'{prefix}{i}', seq, b'I' * read_length, mate), at
                )
            )
        pairs.append((reads[0], reads[1]))
    return pairs


def random_reads(
    n: int, read_length: int = 100, *, seed: int = 3, prefix: str = 'noise'
) -> List[ReadRecord]:
    """Reads drawn independently of any genome."""
    rng = np.random.default_rng(seed)
    return [
        ReadRecord(
            f'{prefix}{i}',
            _BASES[rng.integers(0, 4, size=read_length)].tobytes(),
            b'I' * read_length,
        )
        for i in range(n)
    ]


def reads_of(
    planted: List[PlantedRead], limit: Optional[int] = None
) -> List[ReadRecord]:
    return [p.read for p in planted[:limit]]
