import json

import numpy as np
import pytest

from errors import AlignmentError, ArchiveError, SplitError
from imagesets import generate_synthetic, save_png
from pairing import (assert_disjoint, compute_manifest_hash, dilute, harvest_leakage, make_splits, read_archive,
                     verify_archive, write_archive)
from protections import ProtectionSpec

SPEC = ProtectionSpec(kind='classwise-linf', class_count=3)


def test_splits_are_disjoint_and_sized(shapes_small):
    split = make_splits(shapes_small, [30, 15, 15], seed=0)
    assert split.sizes() == (30, 15, 15)
    ids = [set(s.ids) for s in (split.protect_set, split.reference_set, split.test_set)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])


def test_splits_are_stratified(shapes_small):
    split = make_splits(shapes_small, [30, 15, 15], seed=0)
    counts = np.bincount(split.protect_set.labels, minlength=3)
    assert np.all(np.abs(counts - 10) <= 1)


def test_splits_are_seeded(shapes_small):
    a = make_splits(shapes_small, [20, 20, 10], seed=4)
    b = make_splits(shapes_small, [20, 20, 10], seed=4)
    c = make_splits(shapes_small, [20, 20, 10], seed=5)
    assert a.protect_set.ids == b.protect_set.ids
    assert a.test_set.ids == b.test_set.ids
    assert a.protect_set.ids != c.protect_set.ids


def test_split_size_errors(shapes_small):
    with pytest.raises(SplitError):
        make_splits(shapes_small, [40, 20, 10], seed=0)
    with pytest.raises(SplitError):
        make_splits(shapes_small, [10, -1, 10], seed=0)


def test_assert_disjoint_detects_overlap(shapes_small):
    with pytest.raises(SplitError):
        assert_disjoint(shapes_small.subset([0, 1]), shapes_small.subset([1, 2]))


def test_harvest_draws_from_reference(shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=12, seed=3)
    assert len(archive) == 12
    assert set(archive.ids) <= set(shapes_small.ids)
    by_id = dict(zip(shapes_small.ids, shapes_small.labels))
    assert all(by_id[i] == label for i, label in zip(archive.ids, archive.labels))
    assert not np.array_equal(archive.clean, archive.protected)
    assert harvest_leakage(SPEC, shapes_small, n=12, seed=3).ids == archive.ids


def test_harvest_per_class(shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, seed=1, class_filter=[0, 2], per_class=4)
    assert sorted(np.bincount(archive.labels, minlength=3).tolist()) == [0, 4, 4]
    assert set(archive.labels.tolist()) == {0, 2}
    with pytest.raises(SplitError):
        harvest_leakage(SPEC, shapes_small, seed=1, class_filter=[0], per_class=1000)
    with pytest.raises(SplitError):
        harvest_leakage(SPEC, shapes_small, n=7, seed=1, class_filter=[0, 2], per_class=4)


def test_harvest_rejects_oversized_requests(shapes_small):
    with pytest.raises(SplitError):
        harvest_leakage(SPEC, shapes_small, n=61, seed=0)
    with pytest.raises(SplitError):
        harvest_leakage(SPEC, shapes_small, n=25, seed=0, class_filter=[1])


def test_archive_round_trip(tmp_path, shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=8, seed=2)
    write_archive(archive, tmp_path / 'pairs')
    loaded = read_archive(tmp_path / 'pairs')
    assert loaded.ids == archive.ids
    assert np.array_equal(loaded.labels, archive.labels)
    assert np.array_equal(loaded.clean, archive.clean)
    assert np.array_equal(loaded.protected, archive.protected)
    assert loaded.manifest_hash == archive.manifest_hash
    manifest = json.loads((tmp_path / 'pairs' / 'manifest.json').read_text())
    assert manifest['count'] == 8
    assert manifest['records'][0]['clean'].startswith('clean/')


def test_archive_refuses_to_overwrite(tmp_path, shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=4, seed=2)
    write_archive(archive, tmp_path / 'pairs')
    with pytest.raises(ArchiveError):
        write_archive(archive, tmp_path / 'pairs')
    write_archive(archive, tmp_path / 'pairs', overwrite=True)


def test_tampered_archive_is_rejected(tmp_path, shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=4, seed=2)
    write_archive(archive, tmp_path / 'pairs')
    first = archive.ids[0]
    save_png(tmp_path / 'pairs' / 'protected' / f"{first}.png", archive.clean[0])
    with pytest.raises(ArchiveError):
        read_archive(tmp_path / 'pairs')


def test_missing_manifest(tmp_path):
    with pytest.raises(ArchiveError):
        read_archive(tmp_path)


def test_manifest_hash_tracks_pixels(shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=4, seed=2)
    before = archive.manifest_hash
    changed = archive.protected.copy()
    changed[0, 0, 0, 0] = 1.0 - changed[0, 0, 0, 0]
    assert compute_manifest_hash(archive.manifest(), archive.clean, changed) != before


def test_verify_archive(shapes_small):
    archive = harvest_leakage(SPEC, shapes_small, n=5, seed=2)
    assert verify_archive(archive) == []
    archive.protected[2] = archive.clean[2]
    assert verify_archive(archive) == [archive.ids[2]]


def test_dilute(shapes_small):
    protected = shapes_small.subset(range(10))
    extra = shapes_small.subset(range(10, 16))
    combined = dilute(protected, extra)
    assert len(combined) == 16
    assert combined.meta['provenance'].tolist() == ['protected'] * 10 + ['clean'] * 6
    assert dilute(protected, extra.subset([])) is protected
    with pytest.raises(AlignmentError):
        dilute(protected, shapes_small.subset([9, 10]))


def test_synthetic_ids_are_unique_content_digests():
    data = generate_synthetic(40, image_size=8, classes=4, seed=0)
    assert len(set(data.ids)) == 40
    assert all(len(i) == 16 for i in data.ids)
    assert np.bincount(data.labels).tolist() == [10, 10, 10, 10]
