import logging
import math
from typing import Iterator, List, Optional, Sequence

from app.domain.bloom import (
    DEFAULT_BITS_PER_ELEMENT,
    DEFAULT_HASHES,
    DEFAULT_SEED,
    BloomFilter,
    next_power_of_two,
    params_fingerprint,
)
from app.domain.digest import sequence_digest
from app.domain.errors import InvalidPartitioning
from app.domain.models import (
    DispatchParams,
    KmerIndex,
    ReferenceGenome,
    ReferenceSegment,
)

logger = logging.getLogger(__name__)

DEFAULT_SEED_LENGTH = 16


# ----- Partition -----
def partition_reference(
    genome: ReferenceGenome, p: int, overlap: int
) -> List[ReferenceSegment]:
    """Split ``genome`` into ``p`` balanced segments.

    Core lengths differ by at most one base; every segment but the last is
    extended by ``overlap`` bases taken from its right neighbour so that any
    window of ``overlap + 1`` bases lies wholly inside some segment.
    """
    length = genome.length
    if p < 1:
        raise InvalidPartitioning(f'partition count must be >= 1, got {p}')
    if p > length:
        raise InvalidPartitioning(
            f'cannot split {length} bases into {p} partitions', stage='partition'
        )
    if overlap < 0 or (p > 1 and overlap >= math.ceil(length / p)):
        raise InvalidPartitioning(
            f'overlap {overlap} must be in [0, {math.ceil(length / p)}) '
            f'for {p} partitions of {length} bases',
            stage='partition',
        )

    base, extra = divmod(length, p)
    segments = []
    offset = 0
    for i in range(p):
        core = base + (1 if i < extra else 0)
        right = overlap if i < p - 1 else 0
        end = min(length, offset + core + right)
        segments.append(
            ReferenceSegment(
                partition_id=i,
                sequence=genome.sequence[offset:end],
                global_offset=offset,
                core_length=core,
                overlap=end - offset - core,
            )
        )
        offset += core
    return segments


def segment_size_estimate(total_bases: int, p: int) -> int:
    """Largest core length a balanced split of ``total_bases`` produces."""
    return math.ceil(total_bases / p)


# ----- Index -----
def build_index(segment: ReferenceSegment, seed_length: int) -> KmerIndex:
    seq = segment.sequence
    if seed_length < 1 or seed_length > len(seq):
        raise InvalidPartitioning(
            f'seed length {seed_length} does not fit segment of {len(seq)} bases',
            stage='index',
            partition_id=segment.partition_id,
        )
    postings = {}
    # next position that is clear of the last N seen
    clear_from = 0
    for i in range(len(seq) - seed_length + 1):
        n_at = seq.rfind(b'N', i, i + seed_length)
        if n_at >= 0:
            clear_from = n_at + 1
        if i < clear_from:
            continue
        kmer = seq[i : i + seed_length]
        bucket = postings.get(kmer)
        if bucket is None:
            postings[kmer] = [i]
        else:
            bucket.append(i)
    logger.debug(
        'indexed partition %s: %s distinct %s-mers',
        segment.partition_id,
        len(postings),
        seed_length,
    )
    return KmerIndex(
        partition_id=segment.partition_id,
        seed_length=seed_length,
        segment_digest=sequence_digest(seq),
        postings=postings,
    )


# ----- Bloom filters -----
def iter_bmers(sequence: bytes, b: int, stride: int) -> Iterator[bytes]:
    """b-mers at ``0, stride, 2*stride, ...`` plus the flush-right final window.

    Windows containing ``N`` are skipped; a sequence shorter than ``b`` has none.
    """
    n = len(sequence)
    if n < b:
        return
    last = n - b
    starts = range(0, last + 1, stride)
    for start in starts:
        bmer = sequence[start : start + b]
        if b'N' not in bmer:
            yield bmer
    if last % stride:
        bmer = sequence[last:]
        if b'N' not in bmer:
            yield bmer


def count_bmers(length: int, b: int, stride: int) -> int:
    if length < b:
        return 0
    last = length - b
    return last // stride + 1 + (1 if last % stride else 0)


def auto_bloom_bits(
    segment_lengths: Sequence[int],
    params: DispatchParams,
    bits_per_element: int = DEFAULT_BITS_PER_ELEMENT,
) -> int:
    """Bits for the largest segment at ``bits_per_element``, before rounding."""
    largest = max(count_bmers(n, params.b, params.stride) for n in segment_lengths)
    return max(64, largest * bits_per_element)


def filter_bits(
    segment_lengths: Sequence[int],
    params: DispatchParams,
    m: Optional[int] = None,
    bits_per_element: int = DEFAULT_BITS_PER_ELEMENT,
) -> int:
    """Bit count every filter of a set shares: ``m`` or the auto size, rounded up."""
    return next_power_of_two(
        m or auto_bloom_bits(segment_lengths, params, bits_per_element)
    )


def generate_bloom_filters(
    segments: Sequence[ReferenceSegment],
    params: DispatchParams,
    m: Optional[int] = None,
    k: int = DEFAULT_HASHES,
    *,
    reference_id: str,
    seed: int = DEFAULT_SEED,
    bits_per_element: int = DEFAULT_BITS_PER_ELEMENT,
) -> List[BloomFilter]:
    shortest = min(s.length for s in segments)
    if params.b > shortest:
        raise InvalidPartitioning(
            f'bmer length {params.b} exceeds the shortest segment ({shortest} bases)',
            stage='bloom_build',
        )
    bits = filter_bits([s.length for s in segments], params, m, bits_per_element)
    fingerprint = params_fingerprint(reference_id, params.b, params.l, bits, k)

    filters = []
    for segment in segments:
        bf = BloomFilter(
            bits,
            k,
            seed=seed,
            partition_id=segment.partition_id,
            params_fingerprint=fingerprint,
        )
        bf.update(iter_bmers(segment.sequence, params.b, params.stride))
        logger.debug(
            'bloom filter partition %s: n=%s m=%s fill=%.3f',
            segment.partition_id,
            bf.n_inserted,
            bf.m,
            bf.fill_ratio(),
        )
        filters.append(bf)
    return filters
