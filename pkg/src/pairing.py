"""
Threat-model data pipeline: disjoint splits, protection leakage harvesting,
the dilution baseline, and the PairArchive directory format.

PairArchive layout (see docs/PAIR_ARCHIVE_FORMAT.md):
    manifest.json          records, protection spec and manifest_hash
    clean/<id>.png         8-bit clean image
    protected/<id>.png     8-bit protected image
"""
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from config import canonical_json, numpy_rng
from errors import AlignmentError, ArchiveError, SplitError
from imagesets import ImageSet, load_png, save_png, to_uint8
from protections import ProtectionSpec, get_service, protection_id

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 1


@dataclass
class DatasetSplit:
    protect_set: ImageSet
    reference_set: ImageSet
    test_set: ImageSet

    def sizes(self):
        return len(self.protect_set), len(self.reference_set), len(self.test_set)


def assert_disjoint(*sets):
    """Raise SplitError if any two image sets share an id."""
    seen = {}
    for n, s in enumerate(sets):
        for image_id in s.ids:
            if image_id in seen and seen[image_id] != n:
                raise SplitError(f"image {image_id} appears in sets {seen[image_id]} and {n}")
            seen[image_id] = n


def _split_indices(indices, labels, first_size, seed):
    """Split indices into (first_size, rest), stratified when class counts permit."""
    if first_size == 0:
        return np.array([], dtype=np.int64), indices
    if first_size == len(indices):
        return indices, np.array([], dtype=np.int64)
    try:
        a, b = train_test_split(indices, train_size=first_size, random_state=seed % (2 ** 32),
                                stratify=labels[indices])
    except ValueError as e:
        logger.warning(f"⚠️  Stratified split not possible ({e}); falling back to a random split")
        a, b = train_test_split(indices, train_size=first_size, random_state=seed % (2 ** 32))
    return np.asarray(a), np.asarray(b)


def make_splits(dataset, sizes, seed):
    """Seeded disjoint (protect, reference, test) split of an ImageSet."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise SplitError(f"sizes must be three non-negative integers, got {sizes}")
    total = sum(sizes)
    if total > len(dataset):
        raise SplitError(f"requested {total} images but the dataset has {len(dataset)}")
    labels = dataset.labels
    indices = np.arange(len(dataset))
    chosen, _ = _split_indices(indices, labels, total, seed)
    protect_idx, rest = _split_indices(chosen, labels, sizes[0], seed + 1)
    reference_idx, test_idx = _split_indices(rest, labels, sizes[1], seed + 2)

    split = DatasetSplit(dataset.subset(np.sort(protect_idx)),
                         dataset.subset(np.sort(reference_idx)),
                         dataset.subset(np.sort(test_idx)))
    assert_disjoint(split.protect_set, split.reference_set, split.test_set)
    logger.info(f"Split sizes protect/reference/test = {split.sizes()}")
    return split


class PairArchive:
    """Aligned (clean, protected) pairs with labels and protection provenance."""

    def __init__(self, spec, records, clean, protected):
        self.spec = spec
        self.records = records.reset_index(drop=True)
        self.clean = np.asarray(clean, dtype=np.float32)
        self.protected = np.asarray(protected, dtype=np.float32)
        if not (len(self.records) == len(self.clean) == len(self.protected)):
            raise ArchiveError("records, clean and protected arrays differ in length")
        if self.clean.shape != self.protected.shape:
            raise ArchiveError(f"clean {self.clean.shape} and protected {self.protected.shape} shapes differ")
        self._hash = None

    def __len__(self):
        return len(self.records)

    @property
    def ids(self):
        return self.records['id'].astype(str).tolist()

    @property
    def labels(self):
        return self.records['label'].to_numpy(dtype=np.int64)

    @property
    def protection_id(self):
        return protection_id(self.spec)

    def clean_set(self):
        return ImageSet(self.clean, self.records[['id', 'label']].copy())

    def protected_set(self):
        return ImageSet(self.protected, self.records[['id', 'label', 'protection_id']].copy())

    def manifest(self):
        """Manifest dict without the hash field."""
        return {
            'format': ARCHIVE_FORMAT,
            'count': len(self),
            'protection': {'id': self.protection_id, 'spec': self.spec.to_dict()},
            'records': [
                {
                    'id': r.id,
                    'label': int(r.label),
                    'protection_id': r.protection_id,
                    'clean': f"clean/{r.id}.png",
                    'protected': f"protected/{r.id}.png",
                }
                for r in self.records.itertuples(index=False)
            ],
        }

    @property
    def manifest_hash(self):
        if self._hash is None:
            self._hash = compute_manifest_hash(self.manifest(), self.clean, self.protected)
        return self._hash


def compute_manifest_hash(manifest, clean, protected):
    """sha256 over the canonical manifest followed by every pair's 8-bit pixels."""
    h = hashlib.sha256()
    h.update(canonical_json(manifest).encode('utf-8'))
    for c, p in zip(clean, protected):
        h.update(to_uint8(c).tobytes())
        h.update(to_uint8(p).tobytes())
    return h.hexdigest()


def harvest_leakage(spec, reference_set, n=None, seed=0, class_filter=None, per_class=None):
    """
    Query the protection service on clean reference images.

    Either n images drawn from the (optionally class-filtered) reference set,
    or per_class images from each class of class_filter.
    """
    rng = numpy_rng(seed)
    labels = reference_set.labels
    if per_class is not None:
        classes = sorted(set(int(c) for c in (class_filter if class_filter is not None else np.unique(labels))))
        chosen = []
        for c in classes:
            pool = np.flatnonzero(labels == c)
            if len(pool) < per_class:
                raise SplitError(f"class {c} has {len(pool)} reference images, {per_class} requested")
            chosen.extend(rng.choice(pool, size=per_class, replace=False).tolist())
        if n is not None and n != len(chosen):
            raise SplitError(f"n={n} conflicts with per_class={per_class} over {len(classes)} classes")
        indices = np.asarray(chosen, dtype=np.int64)
    else:
        if n is None:
            raise SplitError("harvest needs n or per_class")
        pool = np.arange(len(reference_set))
        if class_filter is not None:
            pool = pool[np.isin(labels, list(class_filter))]
        if n > len(pool):
            raise SplitError(f"requested {n} pairs but only {len(pool)} reference images are eligible")
        indices = rng.choice(pool, size=n, replace=False)

    clean = reference_set.subset(indices)
    service = get_service(spec)
    protected = service.protect_batch(clean.images, clean.labels, clean.ids)
    records = pd.DataFrame({'id': clean.ids, 'label': clean.labels, 'protection_id': service.id})
    archive = PairArchive(spec, records, clean.images, protected)
    logger.info(f"Harvested {len(archive)} leakage pairs with {service.id}")
    return archive


def verify_archive(archive):
    """Ids whose stored protected image differs from a fresh protect() call."""
    service = get_service(archive.spec)
    mismatched = []
    for image_id, label, clean, protected in zip(archive.ids, archive.labels, archive.clean, archive.protected):
        expected = to_uint8(service.protect(clean, label, image_id))
        if not np.array_equal(expected, to_uint8(protected)):
            mismatched.append(image_id)
    return mismatched


def write_archive(archive, path, overwrite=False):
    """Persist an archive; images first, manifest.json last."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ArchiveError(f"{path} already exists and is not empty")
        shutil.rmtree(path)
    (path / 'clean').mkdir(parents=True, exist_ok=True)
    (path / 'protected').mkdir(parents=True, exist_ok=True)
    for image_id, clean, protected in zip(archive.ids, archive.clean, archive.protected):
        save_png(path / 'clean' / f"{image_id}.png", clean)
        save_png(path / 'protected' / f"{image_id}.png", protected)
    manifest = archive.manifest()
    manifest['manifest_hash'] = archive.manifest_hash
    (path / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Archive written: {path} ({len(archive)} pairs, hash {archive.manifest_hash[:12]})")
    return path


def read_archive(path):
    """Load an archive and check its manifest hash."""
    path = Path(path)
    manifest_file = path / 'manifest.json'
    if not manifest_file.exists():
        raise ArchiveError(f"{path}: manifest.json not found")
    try:
        manifest = json.loads(manifest_file.read_text(encoding='utf-8'))
        stored_hash = manifest.pop('manifest_hash')
        spec = ProtectionSpec.from_dict(manifest['protection']['spec'])
        records = manifest['records']
    except (KeyError, TypeError, ValueError) as e:
        raise ArchiveError(f"{path}: malformed manifest ({e})")
    if manifest.get('format') != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path}: unsupported archive format {manifest.get('format')}")
    if manifest.get('count') != len(records):
        raise ArchiveError(f"{path}: count {manifest.get('count')} but {len(records)} records")

    clean, protected = [], []
    for rec in records:
        try:
            clean.append(load_png(path / rec['clean']))
            protected.append(load_png(path / rec['protected']))
        except FileNotFoundError as e:
            raise ArchiveError(f"{path}: missing image ({e.filename})")
    table = pd.DataFrame([{'id': r['id'], 'label': r['label'], 'protection_id': r['protection_id']}
                          for r in records], columns=['id', 'label', 'protection_id'])
    shape = clean[0].shape if clean else (0, 0, 0)
    archive = PairArchive(spec, table,
                          np.stack(clean) if clean else np.zeros((0,) + shape, dtype=np.float32),
                          np.stack(protected) if protected else np.zeros((0,) + shape, dtype=np.float32))
    if archive.manifest_hash != stored_hash:
        raise ArchiveError(f"{path}: manifest hash mismatch (stored {stored_hash[:12]}, "
                           f"computed {archive.manifest_hash[:12]})")
    return archive


def dilute(protected_dataset, clean_extra):
    """Protected set followed by extra clean images, tagged by provenance."""
    if len(clean_extra) == 0:
        return protected_dataset
    overlap = set(protected_dataset.ids) & set(clean_extra.ids)
    if overlap:
        raise AlignmentError(f"{len(overlap)} ids appear in both inputs (e.g. {sorted(overlap)[0]})")
    left = protected_dataset.with_images(protected_dataset.images, provenance='protected')
    right = clean_extra.with_images(clean_extra.images, provenance='clean')
    combined = left.concat(right)
    logger.info(f"Diluted {len(protected_dataset)} protected images with {len(clean_extra)} clean images")
    return combined
