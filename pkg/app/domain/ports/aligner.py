from typing import List, Protocol, Sequence

from app.domain.models import AlignmentRecord, KmerIndex, ReadRecord, ReferenceSegment


class AlignerPort(Protocol):
    def align(
        self,
        segment: ReferenceSegment,
        index: KmerIndex,
        reads: Sequence[ReadRecord],
    ) -> List[AlignmentRecord]:
        raise NotImplementedError
