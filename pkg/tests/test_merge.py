import itertools

import pytest

from app.domain.errors import ConflictingDuplicates, SealFailure
from app.domain.models import (
    FLAG_FIRST,
    FLAG_MATE_UNMAPPED,
    FLAG_PAIRED,
    FLAG_SECOND,
    FLAG_UNMAPPED,
    AlignmentRecord,
    Mate,
    ReadRecord,
)
from app.domain.seqio import parse_sam
from app.services.merge import finalize, finalize_file, merge, select_best
from app.services.sealvault import KeyPolicy, SealVault


def _hit(read_id, pid, pos, score, mate=None, cigar='4M'):
    return AlignmentRecord(
        read_id=read_id,
        partition_id=pid,
        segment_pos=pos - 1,
        global_pos=pos,
        score=score,
        cigar=cigar,
        mapped=True,
        mate=mate,
    )


def _read(read_id, mate=None):
    return ReadRecord(read_id, b'ACGT', b'IIII', mate)


def test_higher_score_wins():
    best = select_best(
        [
            (0, [_hit('r', 0, 100, 90)]),
            (1, [_hit('r', 1, 500, 95)]),
        ]
    )
    assert best[('r', '')].global_pos == 500


def test_overlap_duplicate_goes_to_smallest_partition():
    best = select_best(
        [
            (1, [_hit('r', 1, 250, 100)]),
            (0, [_hit('r', 0, 250, 100)]),
        ]
    )
    assert best[('r', '')].partition_id == 0


def test_equal_scores_prefer_smaller_position():
    best = select_best([(2, [_hit('r', 2, 900, 80)]), (3, [_hit('r', 3, 120, 80)])])
    assert best[('r', '')].global_pos == 120


def test_selection_is_independent_of_partition_order():
    groups = [
        (0, [_hit('a', 0, 10, 50), _hit('b', 0, 99, 70)]),
        (1, [_hit('a', 1, 40, 60), _hit('b', 1, 99, 70)]),
        (2, [_hit('a', 2, 80, 60), AlignmentRecord.unmapped('b', 2)]),
    ]
    results = {
        tuple(sorted(select_best(list(order)).items()))
        for order in itertools.permutations(groups)
    }
    assert len(results) == 1


def test_conflicting_scores_at_same_position():
    with pytest.raises(ConflictingDuplicates):
        select_best([(0, [_hit('r', 0, 250, 100)]), (1, [_hit('r', 1, 250, 97)])])


def test_partition_claim_is_checked():
    with pytest.raises(ConflictingDuplicates):
        select_best([(0, [_hit('r', 5, 10, 10)])])


def test_merge_emits_every_read_in_input_order():
    reads = [_read('c'), _read('a'), _read('b')]
    per_partition = [
        (0, [_hit('a', 0, 11, 4), AlignmentRecord.unmapped('c', 0)]),
        (1, [_hit('a', 1, 11, 4)]),
    ]
    records = merge(per_partition, reads, 'chr1')
    assert [r.qname for r in records] == ['c', 'a', 'b']
    c, a, b = records
    assert c.flag & FLAG_UNMAPPED and c.rname == '*' and c.pos == 0
    assert b.flag & FLAG_UNMAPPED and b.seq == b'ACGT'
    assert a.rname == 'chr1'
    assert a.pos == 11
    assert a.mapq == 255
    assert a.score_tag == 4


def test_merge_with_no_partition_output():
    records = merge([], [_read('x')], 'chr1')
    assert len(records) == 1 and records[0].unmapped


def test_merge_pairs_sets_mate_fields():
    reads = [
        _read('p', Mate.FIRST),
        _read('p', Mate.SECOND),
        _read('q', Mate.FIRST),
        _read('q', Mate.SECOND),
    ]
    per_partition = [
        (
            0,
            [
                _hit('p', 0, 100, 4, Mate.FIRST),
                _hit('p', 0, 400, 4, Mate.SECOND),
                _hit('q', 0, 700, 4, Mate.FIRST),
            ],
        )
    ]
    p1, p2, q1, q2 = merge(per_partition, reads, 'chr1')
    assert p1.flag == FLAG_PAIRED | FLAG_FIRST
    assert p2.flag == FLAG_PAIRED | FLAG_SECOND
    assert (p1.rnext, p1.pnext) == ('=', 400)
    assert (p2.rnext, p2.pnext) == ('=', 100)
    assert q1.flag == FLAG_PAIRED | FLAG_FIRST | FLAG_MATE_UNMAPPED
    assert q2.flag & FLAG_UNMAPPED
    assert q2.flag & FLAG_SECOND


def test_finalize_seals_for_the_user(vault):
    records = merge([(0, [_hit('a', 0, 1, 4)])], [_read('a')], 'chr1')
    blob = finalize(records, vault, [('chr1', 10)])
    assert blob.policy == KeyPolicy.user_key()
    sam = vault.unseal(blob, KeyPolicy.user_key())
    assert [r.qname for r in parse_sam(sam)] == ['a']


def test_finalize_file(tmp_path, vault):
    target = tmp_path / 'out' / 'final.sam.sealed'
    target = finalize_file([], vault, [('chr1', 10)], target)
    assert vault.unseal_file(target, KeyPolicy.user_key()).startswith(b'@HD')


def test_finalize_without_key_material():
    with pytest.raises(SealFailure) as e:
        finalize([], SealVault(None), [('chr1', 10)])
    assert e.value.stage == 'merge'
