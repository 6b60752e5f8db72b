"""Built-in seed-and-extend aligner.

Stride-1 seeds of the index's seed length are looked up in the postings,
hit diagonals (``segment_pos - read_pos``) are clustered when they lie
within ``band_width`` of each other, and each cluster is extended with an
affine-gap, semi-global DP (the whole read is aligned, the reference window
is free at both ends) restricted to the cluster's band window.

Gap of length g costs ``gap_open + g * gap_extend``.
"""

import logging
from dataclasses import dataclass
from itertools import groupby
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.adapters.aligner.constants import DEFAULT_MAX_SEED_OCCURRENCES
from app.domain.digest import sequence_digest
from app.domain.errors import IndexSegmentMismatch
from app.domain.models import (
    AlignmentRecord,
    KmerIndex,
    ReadRecord,
    ReferenceSegment,
    ScoringScheme,
)
from app.domain.ports.aligner import AlignerPort

logger = logging.getLogger(__name__)

_N = ord('N')
_NEG = -(10**9)


@dataclass(frozen=True)
class Candidate:
    score: int
    segment_pos: int
    cigar: str


def _better(a: Optional[Candidate], b: Optional[Candidate]) -> Optional[Candidate]:
    """Higher score wins; equal scores go to the lower segment position."""
    if a is None:
        return b
    if b is None:
        return a
    if b.score > a.score or (b.score == a.score and b.segment_pos < a.segment_pos):
        return b
    return a


def _cigar(ops: List[str]) -> str:
    return ''.join(f'{len(list(run))}{op}' for op, run in groupby(ops))


def _substitution_row(base: int, window: np.ndarray, scoring: ScoringScheme):
    if base == _N:
        return np.full(window.shape[0], scoring.mismatch, dtype=np.int64)
    return np.where(window == base, scoring.match, scoring.mismatch).astype(np.int64)


def semiglobal_align(
    read: bytes, window: bytes, scoring: ScoringScheme
) -> Optional[Candidate]:
    """Best alignment of all of ``read`` to a substring of ``window``.

    Rows are filled with numpy; the horizontal gap state is a running maximum
    over ``H - gap_extend * column``. Among equal best scores the lowest start
    column wins. ``segment_pos`` of the result is relative to ``window``.
    """
    rd = np.frombuffer(read, dtype=np.uint8)
    win = np.frombuffer(window, dtype=np.uint8)
    n_rows, n_cols = len(rd), len(win)
    if n_rows == 0 or n_cols == 0:
        return None

    oe = scoring.gap_open + scoring.gap_extend
    ext = scoring.gap_extend
    cols = np.arange(n_cols + 1, dtype=np.int64)

    H = np.full((n_rows + 1, n_cols + 1), _NEG, dtype=np.int64)
    E = np.full_like(H, _NEG)
    F = np.full_like(H, _NEG)
    H[0, :] = 0

    for i in range(1, n_rows + 1):
        sub = _substitution_row(int(rd[i - 1]), win, scoring)
        f_row = np.maximum(H[i - 1] + oe, F[i - 1] + ext)
        hd = np.empty(n_cols + 1, dtype=np.int64)
        hd[0] = f_row[0]
        hd[1:] = np.maximum(H[i - 1, :-1] + sub, f_row[1:])
        running = np.maximum.accumulate(hd - ext * cols)
        e_row = np.full(n_cols + 1, _NEG, dtype=np.int64)
        e_row[1:] = running[:-1] + scoring.gap_open + ext * cols[1:]
        F[i] = f_row
        E[i] = e_row
        H[i] = np.maximum(hd, e_row)

    last = H[n_rows]
    best = int(last.max())
    if best <= _NEG // 2:
        return None

    result = None
    for end in np.flatnonzero(last == best):
        start, ops = _traceback(H, E, F, rd, win, int(end), scoring)
        result = _better(result, Candidate(best, start, _cigar(ops)))
    return result


def _traceback(H, E, F, rd, win, end: int, scoring: ScoringScheme):
    oe = scoring.gap_open + scoring.gap_extend
    i, j, state = len(rd), end, 'H'
    ops: List[str] = []
    while i > 0:
        if state == 'H':
            if j > 0:
                base = int(rd[i - 1])
                s = (
                    scoring.match
                    if base != _N and base == int(win[j - 1])
                    else scoring.mismatch
                )
                if H[i, j] == H[i - 1, j - 1] + s:
                    ops.append('M')
                    i, j = i - 1, j - 1
                    continue
            state = 'F' if H[i, j] == F[i, j] else 'E'
        elif state == 'F':
            ops.append('I')
            if F[i, j] == H[i - 1, j] + oe:
                state = 'H'
            i -= 1
        else:
            ops.append('D')
            if E[i, j] == H[i, j - 1] + oe:
                state = 'H'
            j -= 1
    ops.reverse()
    return j, ops


def score_alignment(
    reference: bytes, read: bytes, pos: int, cigar: str, scoring: ScoringScheme
) -> int:
    """Rescore an alignment from its 0-based start and CIGAR."""
    score = 0
    r, q = pos, 0
    num = ''
    for ch in cigar:
        if ch.isdigit():
            num += ch
            continue
        length = int(num)
        num = ''
        if ch == 'M':
            for _ in range(length):
                base = read[q]
                score += (
                    scoring.match
                    if base != _N and base == reference[r]
                    else scoring.mismatch
                )
                r += 1
                q += 1
        elif ch == 'I':
            score += scoring.gap(length)
            q += length
        elif ch == 'D':
            score += scoring.gap(length)
            r += length
        else:
            raise ValueError(f'unsupported CIGAR operation {ch}')
    return score


def _cluster(diagonals: Sequence[int], band_width: int) -> List[Tuple[int, int, int]]:
    """(min, max, distinct count) of runs of sorted diagonals within the band."""
    clusters = []
    ordered = sorted(diagonals)
    lo = prev = ordered[0]
    count = 1
    for d in ordered[1:]:
        if d - prev > band_width:
            clusters.append((lo, prev, count))
            lo, count = d, 0
        prev = d
        count += 1
    clusters.append((lo, prev, count))
    return clusters


class SeedExtendAligner(AlignerPort):
    def __init__(
        self,
        scoring: ScoringScheme = ScoringScheme(),
        max_seed_occurrences: int = DEFAULT_MAX_SEED_OCCURRENCES,
    ) -> None:
        self.scoring = scoring
        self.max_seed_occurrences = max_seed_occurrences

    def align(
        self,
        segment: ReferenceSegment,
        index: KmerIndex,
        reads: Sequence[ReadRecord],
    ) -> List[AlignmentRecord]:
        _check_index(index, segment)
        records = [self._align_one(segment, index, read) for read in reads]
        mapped = sum(1 for r in records if r.mapped)
        logger.info(
            'partition %s: aligned %s/%s reads',
            segment.partition_id,
            mapped,
            len(records),
        )
        return records

    def _align_one(
        self, segment: ReferenceSegment, index: KmerIndex, read: ReadRecord
    ) -> AlignmentRecord:
        cand = self.best_candidate(segment, index, read.sequence)
        if cand is None or cand.score < self.scoring.min_report_score:
            return AlignmentRecord.unmapped(read.id, segment.partition_id, read.mate)
        return AlignmentRecord(
            read_id=read.id,
            partition_id=segment.partition_id,
            segment_pos=cand.segment_pos,
            global_pos=cand.segment_pos + segment.global_offset + 1,
            score=cand.score,
            cigar=cand.cigar,
            mapped=True,
            mate=read.mate,
        )

    def best_candidate(
        self, segment: ReferenceSegment, index: KmerIndex, sequence: bytes
    ) -> Optional[Candidate]:
        seeds = self._diagonals(index, sequence)
        if not seeds:
            return None
        best = None
        s = index.seed_length
        for lo, hi, distinct in _cluster(seeds, self.scoring.band_width):
            cand = self._extend(segment.sequence, sequence, lo, hi, distinct == 1, s)
            best = _better(best, cand)
        return best

    def _diagonals(self, index: KmerIndex, sequence: bytes) -> List[int]:
        s = index.seed_length
        found = set()
        for q in range(len(sequence) - s + 1):
            kmer = sequence[q : q + s]
            hits = index.postings.get(kmer)
            if not hits or len(hits) > self.max_seed_occurrences:
                continue
            found.update(pos - q for pos in hits)
        return list(found)

    def _extend(
        self,
        reference: bytes,
        read: bytes,
        lo: int,
        hi: int,
        single: bool,
        seed_length: int,
    ) -> Optional[Candidate]:
        sc = self.scoring
        n = len(read)
        if single and lo >= 0 and lo + n <= len(reference):
            quick = self._ungapped(reference, read, lo, seed_length)
            if quick is not None:
                return quick
        start = max(0, lo - sc.band_width)
        stop = min(len(reference), hi + n + sc.band_width)
        if stop <= start:
            return None
        cand = semiglobal_align(read, reference[start:stop], sc)
        if cand is None:
            return None
        return Candidate(cand.score, start + cand.segment_pos, cand.cigar)

    def _ungapped(self, reference: bytes, read: bytes, diagonal: int, seed_length: int):
        """Ungapped score on a lone diagonal, when no other alignment can reach it.

        Any gapped alignment scores at most ``n*match + gap(1)``; an ungapped one
        on a diagonal without seed hits has a mismatch in every disjoint
        seed-length window. Only a strictly larger score is taken.
        """
        sc = self.scoring
        n = len(read)
        ref = np.frombuffer(reference, dtype=np.uint8, count=n, offset=diagonal)
        rd = np.frombuffer(read, dtype=np.uint8)
        mismatches = int(np.count_nonzero((ref != rd) | (rd == _N)))
        score = (n - mismatches) * sc.match + mismatches * sc.mismatch
        forced = n // seed_length
        gapped_bound = n * sc.match + sc.gap(1)
        seedless_bound = (n - forced) * sc.match + forced * sc.mismatch
        if score > max(gapped_bound, seedless_bound):
            return Candidate(score, diagonal, f'{n}M')
        return None


def _check_index(index: KmerIndex, segment: ReferenceSegment) -> None:
    if (
        index.partition_id != segment.partition_id
        or index.segment_digest != sequence_digest(segment.sequence)
    ):
        raise IndexSegmentMismatch(
            f'index for partition {index.partition_id} was not built over '
            f'segment {segment.partition_id}',
            stage='align',
            partition_id=segment.partition_id,
        )


def align_reads(
    index: KmerIndex,
    segment: ReferenceSegment,
    reads: Sequence[ReadRecord],
    scoring: ScoringScheme = ScoringScheme(),
    *,
    max_seed_occurrences: int = DEFAULT_MAX_SEED_OCCURRENCES,
) -> List[AlignmentRecord]:
    """Best alignment per read within one segment, in input order."""
    aligner = SeedExtendAligner(scoring, max_seed_occurrences)
    return aligner.align(segment, index, reads)
