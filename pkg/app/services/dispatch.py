import logging
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, Iterable, List, Optional, Sequence, Tuple

from app.domain.bloom import BloomFilter
from app.domain.models import DispatchedQuery, DispatchParams, ReadRecord
from app.services.refprep import iter_bmers

logger = logging.getLogger(__name__)

ReadPair = Tuple[ReadRecord, ReadRecord]


def read_bmers(read: ReadRecord, params: DispatchParams) -> List[bytes]:
    return list(iter_bmers(read.sequence, params.b, params.effective_read_stride))


def read_hits(bf: BloomFilter, read: ReadRecord, params: DispatchParams) -> bool:
    """True on the first b-mer of ``read`` the filter reports as present."""
    bmers = iter_bmers(read.sequence, params.b, params.effective_read_stride)
    return any(bf.test(bmer) for bmer in bmers)


def dispatch(
    bf: BloomFilter,
    reads: Iterable[ReadRecord],
    params: DispatchParams,
    *,
    fingerprint: Optional[bytes] = None,
) -> DispatchedQuery:
    """Order-preserving subset of ``reads`` routed to ``bf``'s partition.

    Each read is appended at most once; the first positive b-mer decides.
    """
    if fingerprint is not None:
        bf.check_fingerprint(fingerprint)
    selected = [r for r in reads if read_hits(bf, r, params)]
    return DispatchedQuery(partition_id=bf.partition_id, reads=selected)


def dispatch_pairs(
    bf: BloomFilter,
    pairs: Iterable[ReadPair],
    params: DispatchParams,
    *,
    fingerprint: Optional[bytes] = None,
) -> DispatchedQuery:
    """Pairs go to ``bf``'s partition when either mate hits; mates stay together."""
    if fingerprint is not None:
        bf.check_fingerprint(fingerprint)
    selected: List[ReadRecord] = []
    for first, second in pairs:
        if read_hits(bf, first, params) or read_hits(bf, second, params):
            selected.extend((first, second))
    return DispatchedQuery(partition_id=bf.partition_id, reads=selected)


def dispatch_pair(
    filters: Sequence[BloomFilter], pair: ReadPair, params: DispatchParams
) -> List[int]:
    """Partitions receiving ``pair``: the union of those hit by either mate."""
    first, second = pair
    return [
        bf.partition_id
        for bf in filters
        if read_hits(bf, first, params) or read_hits(bf, second, params)
    ]


def count_undispatched(reads: Iterable[ReadRecord], routed: AbstractSet[str]) -> int:
    """Reads whose id reached no partition; they come out unmapped."""
    return sum(1 for read in reads if read.id not in routed)


@dataclass
class DispatchSummary:
    total_reads: int = 0
    per_partition: Dict[int, int] = field(default_factory=dict)
    undispatched: int = 0

    @classmethod
    def of(
        cls, reads: Sequence[ReadRecord], queries: Iterable[DispatchedQuery]
    ) -> 'DispatchSummary':
        summary = cls(total_reads=len(reads))
        routed = set()
        for query in queries:
            summary.record(query)
            routed.update(read.id for read in query.reads)
        summary.undispatched = count_undispatched(reads, routed)
        return summary

    def record(self, query: DispatchedQuery) -> None:
        self.per_partition[query.partition_id] = len(query.reads)

    @property
    def dispatched_total(self) -> int:
        return sum(self.per_partition.values())

    def reduction(self) -> float:
        """Fraction of the naive all-partitions workload actually dispatched."""
        naive = self.total_reads * max(1, len(self.per_partition))
        return self.dispatched_total / naive if naive else 0.0
