"""
Image sets: float32 (N, C, H, W) arrays in [0, 1] plus a pandas metadata frame
(id, label and provenance columns).

Includes the synthetic colored-shape dataset, folder-of-PNGs ingestion and the
on-disk cache format used by run directories (images.npy + meta.parquet).
"""
import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from config import numpy_rng
from errors import AlignmentError, ConfigurationError

logger = logging.getLogger(__name__)

SHAPE_NAMES = ['disk', 'square', 'triangle', 'ring', 'cross', 'hbar', 'vbar', 'diamond', 'xshape', 'dots']
_DIGEST = re.compile(r'[0-9a-f]{16}')


def to_uint8(images):
    return np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(images):
    """Round onto the 8-bit grid (values k/255)."""
    return (to_uint8(images).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def content_id(image):
    """Content digest of an image's 8-bit levels and shape (16 hex chars)."""
    levels = to_uint8(image)
    h = hashlib.sha256()
    h.update('x'.join(map(str, levels.shape)).encode('ascii'))
    h.update(levels.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ImageSet:
    images: np.ndarray
    meta: pd.DataFrame

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 and len(self.meta) > 0:
            raise ConfigurationError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.meta):
            raise AlignmentError(f"{len(self.images)} images but {len(self.meta)} metadata rows")
        if 'id' not in self.meta.columns or 'label' not in self.meta.columns:
            raise ConfigurationError("metadata needs 'id' and 'label' columns")
        self.meta = self.meta.reset_index(drop=True)

    def __len__(self):
        return len(self.meta)

    @property
    def ids(self):
        return self.meta['id'].astype(str).tolist()

    @property
    def labels(self):
        return self.meta['label'].to_numpy(dtype=np.int64)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    @property
    def class_count(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    @classmethod
    def empty(cls, shape=(3, 32, 32)):
        return cls(np.zeros((0,) + tuple(shape), dtype=np.float32), pd.DataFrame({'id': [], 'label': []}))

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[indices], self.meta.iloc[indices].reset_index(drop=True))

    def select_ids(self, ids):
        position = {image_id: i for i, image_id in enumerate(self.ids)}
        missing = [i for i in ids if i not in position]
        if missing:
            raise AlignmentError(f"{len(missing)} ids not present (first: {missing[0]})")
        return self.subset([position[i] for i in ids])

    def with_images(self, images, **columns):
        """Same metadata (plus extra constant columns) with new pixel data."""
        meta = self.meta.copy()
        for name, value in columns.items():
            meta[name] = value
        return ImageSet(np.asarray(images, dtype=np.float32), meta)

    def concat(self, other):
        meta = pd.concat([self.meta, other.meta], ignore_index=True)
        if len(self) == 0:
            return ImageSet(other.images.copy(), meta)
        if len(other) == 0:
            return ImageSet(self.images.copy(), meta)
        if self.shape != other.shape:
            raise AlignmentError(f"cannot concatenate shapes {self.shape} and {other.shape}")
        return ImageSet(np.concatenate([self.images, other.images]), meta)

    def class_frequencies(self):
        return self.meta['label'].value_counts(normalize=True).sort_index()


# --- Synthetic shapes -----------------------------------------------------

def _shape_mask(kind, xx, yy, cx, cy, r):
    dx, dy = xx - cx, yy - cy
    d = np.sqrt(dx ** 2 + dy ** 2)
    if kind == 0:
        return d < r
    if kind == 1:
        return np.maximum(np.abs(dx), np.abs(dy)) < 0.85 * r
    if kind == 2:
        return (dy > -r) & (dy < r) & (np.abs(dx) < (dy + r) / 2)
    if kind == 3:
        return (d < r) & (d > 0.55 * r)
    if kind == 4:
        return ((np.abs(dx) < r / 4) & (np.abs(dy) < r)) | ((np.abs(dy) < r / 4) & (np.abs(dx) < r))
    if kind == 5:
        return (np.abs(dy) < r / 3) & (np.abs(dx) < r)
    if kind == 6:
        return (np.abs(dx) < r / 3) & (np.abs(dy) < r)
    if kind == 7:
        return np.abs(dx) + np.abs(dy) < r
    if kind == 8:
        return (np.abs(np.abs(dx) - np.abs(dy)) < r / 4) & (np.maximum(np.abs(dx), np.abs(dy)) < r)
    if kind == 9:
        left = np.sqrt((dx + r / 2) ** 2 + dy ** 2) < r / 3
        right = np.sqrt((dx - r / 2) ** 2 + dy ** 2) < r / 3
        return left | right
    raise ConfigurationError(f"no shape for class {kind}")


def generate_synthetic(n, image_size=32, classes=10, seed=0, channels=3, noise=0.03):
    """
    Colored shapes on a dark background; the class decides the geometry,
    position/size/colors are random. Balanced labels, 8-bit quantized,
    unique content ids.
    """
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    rng = numpy_rng(seed)
    coords = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    labels = np.arange(n) % classes
    rng.shuffle(labels)

    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    ids = []
    seen = set()
    for i, label in enumerate(labels):
        while True:
            cx, cy = rng.uniform(-0.3, 0.3, size=2)
            r = rng.uniform(0.4, 0.65)
            mask = _shape_mask(int(label), xx, yy, cx, cy, r)
            fg = rng.uniform(0.45, 1.0, size=3)
            bg = rng.uniform(0.0, 0.35, size=3)
            rgb = np.where(mask[None], fg[:, None, None], bg[:, None, None])
            rgb = rgb + rng.normal(0.0, noise, size=rgb.shape)
            img = rgb.mean(axis=0, keepdims=True) if channels == 1 else rgb[:channels]
            img = quantize(img)
            image_id = content_id(img)
            if image_id not in seen:
                break
        seen.add(image_id)
        images[i] = img
        ids.append(image_id)

    meta = pd.DataFrame({'id': ids, 'label': labels.astype(np.int64), 'source': 'synthetic'})
    logger.info(f"Generated {n} synthetic {channels}x{image_size}x{image_size} images over {classes} classes")
    return ImageSet(images, meta)


# --- PNG I/O ---------------------------------------------------------------

def save_png(path, image):
    """Write one (C, H, W) image in [0, 1] as an 8-bit PNG."""
    levels = to_uint8(image)
    if levels.shape[0] == 1:
        pil = Image.fromarray(levels[0])
    elif levels.shape[0] == 3:
        pil = Image.fromarray(np.ascontiguousarray(levels.transpose(1, 2, 0)))
    else:
        raise ConfigurationError(f"PNG export supports 1 or 3 channels, got {levels.shape[0]}")
    pil.save(path, format='PNG', compress_level=6)


def load_png(path):
    """Read a PNG as a float32 (C, H, W) array in [0, 1]."""
    with Image.open(path) as pil:
        if pil.mode not in ('L', 'RGB'):
            pil = pil.convert('RGB')
        arr = np.asarray(pil, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def load_image_folder(path):
    """
    Ingest a folder of PNGs described by labels.csv (columns id,label; one
    <id>.png per row). Foreign names are replaced by content digests and kept
    in 'source_id'; names that already are 16-hex digests (folders written by
    save_image_folder, including protected and purified ones) are kept so
    ids stay aligned with the clean images. Duplicates are dropped with a warning.
    """
    path = Path(path)
    labels_file = path / 'labels.csv'
    if not labels_file.exists():
        raise ConfigurationError(f"{path}: labels.csv not found")
    table = pd.read_csv(labels_file, dtype={'id': str})
    missing_cols = {'id', 'label'} - set(table.columns)
    if missing_cols:
        raise ConfigurationError(f"{labels_file}: missing columns {sorted(missing_cols)}")

    images, rows, seen = [], [], set()
    for row in table.itertuples(index=False):
        file = path / f"{row.id}.png"
        if not file.exists():
            raise ConfigurationError(f"{path}: image {file.name} listed in labels.csv is missing")
        img = load_png(file)
        if images and img.shape != images[0].shape:
            raise ConfigurationError(f"{file.name}: shape {img.shape} differs from {images[0].shape}")
        name = str(row.id)
        image_id = name if _DIGEST.fullmatch(name) else content_id(img)
        if image_id in seen:
            logger.warning(f"⚠️  {file.name} duplicates an earlier image, skipped")
            continue
        seen.add(image_id)
        images.append(img)
        rows.append({'id': image_id, 'label': int(row.label), 'source_id': name})

    if not images:
        raise ConfigurationError(f"{path}: no images")
    logger.info(f"Loaded {len(images)} images from {path}")
    return ImageSet(np.stack(images), pd.DataFrame(rows))


def save_image_folder(imageset, path):
    """Inverse of load_image_folder: <id>.png files plus labels.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(imageset.ids, imageset.images):
        save_png(path / f"{image_id}.png", img)
    imageset.meta[['id', 'label']].to_csv(path / 'labels.csv', index=False)
    return path


# --- Run-directory cache ---------------------------------------------------

def write_imageset(imageset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / 'images.npy', imageset.images)
    imageset.meta.to_parquet(directory / 'meta.parquet', index=False)
    return directory


def read_imageset(directory):
    directory = Path(directory)
    images = np.load(directory / 'images.npy')
    meta = pd.read_parquet(directory / 'meta.parquet')
    return ImageSet(images, meta)
