import pytest

from app.adapters.storage.workdir import (
    PartitionManifest,
    WorkDir,
    decode_index,
    encode_index,
)
from app.domain.errors import IndexSegmentMismatch, MalformedInput
from app.services.refprep import build_index, partition_reference
from app.services.synthetic import random_genome


@pytest.fixture()
def prepared(tmp_path):
    genome = random_genome(2000, seed=9, name='chrW')
    segments = partition_reference(genome, 3, 40)
    work = WorkDir(tmp_path / 'work').ensure()
    manifest = PartitionManifest.describe(genome.name, genome.sequence, 40, segments)
    work.save_manifest(manifest)
    for segment in segments:
        work.save_segment(segment)
        work.save_index(build_index(segment, 12))
    return work, manifest, segments


def test_manifest_round_trip(prepared):
    work, manifest, _ = prepared
    loaded = work.load_manifest()
    assert loaded == manifest
    assert loaded.reference_id.endswith(':p=3:o=40')
    assert work.segments_cached(loaded)


def test_unreadable_manifest_is_ignored(tmp_path):
    work = WorkDir(tmp_path).ensure()
    assert work.load_manifest() is None
    work.partitions_dir.mkdir(parents=True, exist_ok=True)
    work.manifest_path.write_text('{"reference_name": 3')
    assert work.load_manifest() is None


def test_load_segment(prepared):
    work, manifest, segments = prepared
    entry = manifest.segments[1]
    segment = work.load_segment(entry)
    assert segment.sequence == segments[1].sequence
    assert segment.global_offset == entry.global_offset


def test_edited_segment_is_rejected(prepared):
    work, manifest, _ = prepared
    path = work.segment_path(2)
    header, body = path.read_bytes().split(b'\n', 1)
    flipped = b'C' if body[:1] != b'C' else b'G'
    path.write_bytes(header + b'\n' + flipped + body[1:])
    with pytest.raises(IndexSegmentMismatch) as e:
        work.load_segment(manifest.segments[2])
    assert e.value.partition_id == 2


def test_missing_segment(prepared):
    work, manifest, _ = prepared
    work.segment_path(0).unlink()
    with pytest.raises(MalformedInput):
        work.load_segment(manifest.segments[0])
    assert not work.segments_cached(manifest)


def test_index_round_trip(prepared):
    _, _, segments = prepared
    index = build_index(segments[0], 12)
    decoded = decode_index(encode_index(index))
    assert decoded.postings == index.postings
    assert decoded.segment_digest == index.segment_digest
    assert (decoded.partition_id, decoded.seed_length) == (0, 12)


def test_index_cache_follows_seed_length_and_segment(prepared):
    work, manifest, _ = prepared
    entry = manifest.segments[0]
    assert work.index_cached(entry, 12)
    assert not work.index_cached(entry, 16)
    stale = entry.model_copy(update={'digest': '00' * 32})
    assert not work.index_cached(stale, 12)
    work.index_path(0).write_bytes(b'HSIX')
    assert not work.index_cached(entry, 12)


@pytest.mark.parametrize('cut', [10, -3])
def test_truncated_index(prepared, cut):
    _, _, segments = prepared
    data = encode_index(build_index(segments[0], 12))
    with pytest.raises(MalformedInput):
        decode_index(data[:cut])


def test_index_with_trailing_bytes(prepared):
    _, _, segments = prepared
    data = encode_index(build_index(segments[0], 12))
    with pytest.raises(MalformedInput):
        decode_index(data + b'\x00')


def test_index_over_another_segment(prepared):
    work, _, segments = prepared
    # index 1 copied over index 0's file
    work.index_path(0).write_bytes(work.index_path(1).read_bytes())
    with pytest.raises(IndexSegmentMismatch) as e:
        work.load_index(segments[0])
    assert e.value.stage == 'align'


def test_prune_blooms_keeps_current_set(tmp_path):
    work = WorkDir(tmp_path).ensure()
    current, old = b'\x01' * 32, b'\x02' * 32
    for fingerprint in (current, old):
        for i in range(3):
            work.bloom_path(fingerprint, i).write_bytes(b'x')
    (work.bloom_dir / 'notes.txt').write_text('kept')

    removed = work.prune_blooms(current, 2)
    assert len(removed) == 4
    left = sorted(p.name for p in work.bloom_dir.iterdir())
    expected = [work.bloom_path(current, i).name for i in range(2)] + ['notes.txt']
    assert left == sorted(expected)
    assert work.blooms_cached(current, 2)
