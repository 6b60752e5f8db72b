import pytest

from app.domain.bloom import next_power_of_two, params_fingerprint
from app.domain.errors import InvalidPartitioning
from app.domain.models import DispatchParams, ReferenceGenome
from app.services.refprep import (
    auto_bloom_bits,
    build_index,
    count_bmers,
    filter_bits,
    generate_bloom_filters,
    iter_bmers,
    partition_reference,
    segment_size_estimate,
)
from app.services.synthetic import random_genome


def _genome(length, seed=3):
    return random_genome(length, seed=seed, name='g')


@pytest.mark.parametrize('length, p', [(1000, 1), (1000, 3), (1001, 4), (997, 7)])
def test_partitions_cover_genome(length, p):
    genome = _genome(length)
    segments = partition_reference(genome, p, 20)
    assert len(segments) == p
    cores = [s.core_length for s in segments]
    assert max(cores) - min(cores) <= 1
    assert sum(cores) == length
    # cores tile the genome left to right
    rebuilt = b''.join(s.sequence[: s.core_length] for s in segments)
    assert rebuilt == genome.sequence
    for s in segments:
        end = s.global_offset + s.length
        assert s.sequence == genome.sequence[s.global_offset : end]


def test_overlap_windows_fit_in_some_segment():
    genome = _genome(500)
    overlap = 30
    segments = partition_reference(genome, 5, overlap)
    for start in range(0, genome.length - overlap):
        end = start + overlap + 1
        assert any(
            s.global_offset <= start and end <= s.global_offset + s.length
            for s in segments
        )


def test_last_segment_has_no_overlap():
    segments = partition_reference(_genome(1000), 4, 99)
    assert [s.overlap for s in segments] == [99, 99, 99, 0]
    assert segments[-1].length == segments[-1].core_length


def test_single_partition_is_whole_genome():
    genome = _genome(300)
    (only,) = partition_reference(genome, 1, 99)
    assert only.sequence == genome.sequence
    assert only.global_offset == 0


def test_partition_rejects_bad_arguments():
    genome = _genome(100)
    with pytest.raises(InvalidPartitioning):
        partition_reference(genome, 0, 10)
    with pytest.raises(InvalidPartitioning):
        partition_reference(genome, 101, 0)
    with pytest.raises(InvalidPartitioning):
        partition_reference(genome, 4, 25)
    with pytest.raises(InvalidPartitioning):
        partition_reference(genome, 2, -1)


def test_segment_size_estimate_genome_scale():
    # a 3.2 Gb genome split 80 ways fits in 40 Mb segments
    assert segment_size_estimate(3_200_000_000, 80) == 40_000_000
    assert segment_size_estimate(10, 3) == 4


def test_build_index_postings():
    genome = ReferenceGenome('g', b'ACGTACGTNACGT')
    (segment,) = partition_reference(genome, 1, 0)
    index = build_index(segment, 4)
    assert index.lookup(b'ACGT') == [0, 4, 9]
    assert index.lookup(b'CGTA') == [1]
    # nothing spans the N
    assert all(b'N' not in k for k in index.postings)
    assert index.lookup(b'GTNA') == []


def test_build_index_rejects_oversized_seed():
    (segment,) = partition_reference(ReferenceGenome('g', b'ACGT'), 1, 0)
    with pytest.raises(InvalidPartitioning):
        build_index(segment, 5)


def test_iter_bmers_stride_and_flush_right_window():
    seq = _genome(26).sequence
    bmers = list(iter_bmers(seq, 10, 4))
    assert bmers[0] == seq[0:10]
    assert bmers[1] == seq[4:14]
    assert bmers[-1] == seq[-10:]
    assert len(bmers) == count_bmers(26, 10, 4)


def test_iter_bmers_short_and_n_windows():
    assert list(iter_bmers(b'ACGT', 5, 1)) == []
    assert list(iter_bmers(b'ACNGT', 2, 1)) == [b'AC', b'GT']


def test_auto_bloom_bits_uses_largest_segment():
    params = DispatchParams(b=25, l=15)
    bits = auto_bloom_bits([1000, 2000], params, 12)
    assert bits == count_bmers(2000, 25, 10) * 12
    assert filter_bits([1000, 2000], params) == next_power_of_two(bits)
    assert filter_bits([1000, 2000], params, m=5000) == 8192


def test_generate_bloom_filters_share_size_and_fingerprint():
    genome = _genome(8000)
    params = DispatchParams(b=25, l=15, p=4)
    segments = partition_reference(genome, 4, 99)
    filters = generate_bloom_filters(segments, params, reference_id='ref')
    m = filters[0].m
    fp = params_fingerprint('ref', 25, 15, m, 3)
    assert [f.partition_id for f in filters] == [0, 1, 2, 3]
    assert all(f.m == m and f.params_fingerprint == fp for f in filters)
    for seg, bf in zip(segments, filters):
        assert all(bf.test(b) for b in iter_bmers(seg.sequence, 25, 10))


def test_generate_bloom_filters_rejects_long_bmers():
    segments = partition_reference(_genome(100), 1, 0)
    with pytest.raises(InvalidPartitioning):
        generate_bloom_filters(segments, DispatchParams(b=101, l=0), reference_id='r')
