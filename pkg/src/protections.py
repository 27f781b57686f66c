"""
Simulated black-box protection service.

Three stand-in availability attacks that keep the defining structure and the
norm budget of the published ones, plus seeded mixtures of them and the
Gaussian pre-processing G_beta.

All protections deliver 8-bit images: outputs are level/255 for levels
0..255. L-inf and L2 budgets hold against the raw float input, also when it
is off the 8-bit grid; L0 counts changed pixel positions on the 8-bit grid.
A budget too small to move an off-grid input by whole levels returns the
input unchanged.
"""
import enum
import functools
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from scipy import ndimage

from config import canonical_json, derive_seed, from_dict, make_generator, numpy_rng, short_hash, to_plain
from errors import ProtectionError
from imagesets import content_id

logger = logging.getLogger(__name__)

BUDGET_TOLERANCE = 1e-5
GRID_SLACK = 1e-3


class _FlexibleEnum(str, enum.Enum):
    """Accepts 'CLASSWISE_LINF', 'classwise-linf', 'linf', ... case-insensitively."""

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.strip().lower().replace('_', '-')
            for member in cls:
                if member.value.lower() == key or member.name.lower().replace('_', '-') == key:
                    return member
        return None


class ProtectionKind(_FlexibleEnum):
    CLASSWISE_LINF = 'classwise-linf'
    ONE_PIXEL = 'one-pixel'
    PATCH_L2 = 'patch-l2'
    MIXTURE = 'mixture'


class Norm(_FlexibleEnum):
    L0 = 'L0'
    L2 = 'L2'
    LINF = 'Linf'


KIND_NORM = {
    ProtectionKind.CLASSWISE_LINF: Norm.LINF,
    ProtectionKind.ONE_PIXEL: Norm.L0,
    ProtectionKind.PATCH_L2: Norm.L2,
}

DEFAULT_EPSILON = {
    ProtectionKind.CLASSWISE_LINF: 8 / 255,
    ProtectionKind.ONE_PIXEL: 1.0,
    ProtectionKind.PATCH_L2: 1.0,
    ProtectionKind.MIXTURE: 0.0,
}


@dataclass
class ProtectionSpec:
    """
    epsilon is in [0, 1] intensity units (L0: number of pixel positions).
    MIXTURE ignores its own epsilon/norm; members carry theirs.
    """
    kind: ProtectionKind = ProtectionKind.CLASSWISE_LINF
    epsilon: Optional[float] = None
    norm: Optional[Norm] = None
    class_count: int = 10
    pattern_seed: int = 0
    patch_grid: int = 4
    mixture_members: List['ProtectionSpec'] = field(default_factory=list)

    def __post_init__(self):
        try:
            self.kind = ProtectionKind(self.kind)
        except ValueError:
            raise ProtectionError(f"unknown protection kind {self.kind!r}")
        if self.epsilon is None:
            self.epsilon = DEFAULT_EPSILON[self.kind]
        self.epsilon = float(self.epsilon)
        if self.epsilon < 0:
            raise ProtectionError("epsilon must be >= 0")
        if self.class_count < 1:
            raise ProtectionError("class_count must be >= 1")
        if self.kind == ProtectionKind.MIXTURE:
            if not self.mixture_members:
                raise ProtectionError("MIXTURE needs at least one member")
            members = []
            for m in self.mixture_members:
                m = m if isinstance(m, ProtectionSpec) else from_dict(ProtectionSpec, m)
                if m.kind == ProtectionKind.MIXTURE:
                    raise ProtectionError("mixtures cannot be nested")
                if m.class_count != self.class_count:
                    raise ProtectionError("mixture members must share class_count")
                members.append(m)
            self.mixture_members = members
            self.norm = None
            return
        if self.mixture_members:
            raise ProtectionError(f"{self.kind.value} does not take mixture members")
        expected = KIND_NORM[self.kind]
        if self.norm is None:
            self.norm = expected
        else:
            self.norm = Norm(self.norm)
            if self.norm != expected:
                raise ProtectionError(f"{self.kind.value} is an {expected.value} protection, not {self.norm.value}")
        if self.kind == ProtectionKind.ONE_PIXEL and self.epsilon != 1.0:
            raise ProtectionError("ONE_PIXEL changes exactly one pixel (epsilon must be 1)")
        if self.kind == ProtectionKind.PATCH_L2 and self.patch_grid < 1:
            raise ProtectionError("patch_grid must be >= 1")

    @classmethod
    def from_dict(cls, data, key_lines=None):
        return from_dict(cls, data, key_lines)

    def to_dict(self):
        return to_plain(self)


def protection_id(spec):
    return f"{spec.kind.value}-{short_hash(spec.to_dict())}"


def default_mixture(class_count=10, pattern_seed=0):
    """Mixture of the three stand-ins at their default budgets."""
    members = [ProtectionSpec(kind=k, class_count=class_count, pattern_seed=pattern_seed + i)
               for i, k in enumerate((ProtectionKind.CLASSWISE_LINF, ProtectionKind.ONE_PIXEL,
                                      ProtectionKind.PATCH_L2))]
    return ProtectionSpec(kind=ProtectionKind.MIXTURE, class_count=class_count,
                          pattern_seed=pattern_seed, mixture_members=members)


def to_levels(x):
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.int16)


def from_levels(levels):
    return (levels.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def raw_copy(x):
    return np.clip(np.asarray(x, dtype=np.float32), 0.0, 1.0).copy()


def mixture_index(pattern_seed, image_id, members):
    digest = hashlib.blake2b(f"{pattern_seed}:{image_id}".encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'big') % members


class ProtectionService:
    """
    Frozen black-box protection P built from a spec. Patterns are drawn once
    per (class, image shape) from pattern_seed and never exposed.
    """

    def __init__(self, spec):
        self.spec = spec
        self.id = protection_id(spec)
        self._patterns = {}
        self._members = [ProtectionService(m) for m in spec.mixture_members]

    def _rng(self, label, shape):
        tag = f"{self.spec.kind.value}:{label}:{'x'.join(map(str, shape))}"
        return numpy_rng(derive_seed(self.spec.pattern_seed, tag))

    def _pattern(self, label, shape):
        key = (label, shape)
        if key not in self._patterns:
            self._patterns[key] = self._make_pattern(label, shape)
        return self._patterns[key]

    def _make_pattern(self, label, shape):
        c, h, w = shape
        rng = self._rng(label, shape)
        kind = self.spec.kind
        if kind == ProtectionKind.CLASSWISE_LINF:
            k = int(np.floor(self.spec.epsilon * 255.0 + 1e-9))
            signs = rng.choice(np.array([-1, 1], dtype=np.int16), size=shape)
            return (signs * k).astype(np.int16)
        if kind == ProtectionKind.ONE_PIXEL:
            row, col = int(rng.integers(0, h)), int(rng.integers(0, w))
            color = rng.choice(np.array([0, 255], dtype=np.int16), size=c)
            return row, col, color
        if kind == ProtectionKind.PATCH_L2:
            g = min(self.spec.patch_grid, h, w)
            coarse = rng.standard_normal((c, g, g))
            fine = ndimage.zoom(coarse, (1, h / g, w / g), order=1, mode='nearest')[:, :h, :w]
            norm = np.sqrt(np.sum(fine ** 2))
            if norm == 0:
                return np.zeros(shape)
            return fine / norm
        raise ProtectionError(f"no pattern for {kind.value}")

    def member_for(self, image_id):
        return self._members[mixture_index(self.spec.pattern_seed, image_id, len(self._members))]

    def protect(self, x, label, image_id=None):
        """Protected copy of one (C, H, W) image in [0, 1]."""
        label = int(label)
        if not 0 <= label < self.spec.class_count:
            raise ProtectionError(f"label {label} outside [0, {self.spec.class_count})")
        x = np.asarray(x)
        if x.ndim != 3:
            raise ProtectionError(f"expected a (C, H, W) image, got shape {x.shape}")
        if self.spec.kind == ProtectionKind.MIXTURE:
            if image_id is None:
                image_id = content_id(x)
            return self.member_for(image_id).protect(x, label, image_id)

        levels = to_levels(x)
        pattern = self._pattern(label, x.shape)
        if self.spec.kind == ProtectionKind.ONE_PIXEL:
            row, col, color = pattern
            out = levels.copy()
            current = out[:, row, col]
            out[:, row, col] = 255 - color if np.array_equal(current, color) else color
            return from_levels(out)
        raw = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
        budget = self.spec.epsilon * 255.0
        if self.spec.kind == ProtectionKind.CLASSWISE_LINF:
            if not pattern.any():
                return raw_copy(x)
            lo = np.maximum(np.ceil(raw - budget - GRID_SLACK), 0)
            hi = np.minimum(np.floor(raw + budget + GRID_SLACK), 255)
            return from_levels(np.clip(levels + pattern, lo, hi).astype(np.int16))
        # the rounding residual of an off-grid input counts against the L2 budget
        rounding = levels - raw
        rounding[np.abs(rounding) < 0.1 * GRID_SLACK] = 0.0
        residual = float(np.sqrt(np.sum(rounding ** 2)))
        if residual > budget:
            return raw_copy(x)
        offsets = np.trunc(pattern * (budget - residual)).astype(np.int16)
        return from_levels(np.clip(levels + offsets, 0, 255))

    def protect_batch(self, images, labels, ids=None):
        ids = [None] * len(images) if ids is None else ids
        out = np.empty_like(np.asarray(images, dtype=np.float32))
        for i, (x, y, image_id) in enumerate(zip(images, labels, ids)):
            out[i] = self.protect(x, y, image_id)
        return out


@functools.lru_cache(maxsize=32)
def _service_for(spec_json):
    return ProtectionService(ProtectionSpec.from_dict(json.loads(spec_json)))


def get_service(spec):
    """Shared service per distinct spec; the few most recent are kept."""
    return _service_for(canonical_json(spec.to_dict()))


def protect(spec, x, label, image_id=None):
    return get_service(spec).protect(x, label, image_id)


def protect_dataset(spec, dataset):
    """Protected copy of an ImageSet; ids, labels and order preserved."""
    if len(dataset) == 0:
        return dataset.with_images(np.asarray(dataset.images, dtype=np.float32).copy())
    service = get_service(spec)
    protected = service.protect_batch(dataset.images, dataset.labels, dataset.ids)
    logger.info(f"Protected {len(dataset)} images with {service.id}")
    return dataset.with_images(protected, protection=service.id)


def measure_norm(norm, x, x_protected):
    """
    Perturbation size in [0, 1] units on the raw float images; L0 counts
    pixel positions whose 8-bit levels differ.
    """
    norm = Norm(norm)
    if norm == Norm.L0:
        delta = to_levels(x_protected).astype(np.int32) - to_levels(x).astype(np.int32)
        return float(np.count_nonzero(np.any(delta != 0, axis=0)))
    delta = np.asarray(x_protected, dtype=np.float64) - np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if norm == Norm.LINF:
        return float(np.abs(delta).max(initial=0))
    return float(np.sqrt(np.sum(delta ** 2)))


def check_budget(spec, x, x_protected, image_id=None):
    """(measured norm, within budget) for one image."""
    if spec.kind == ProtectionKind.MIXTURE:
        if image_id is None:
            image_id = content_id(x)
        spec = get_service(spec).member_for(image_id).spec
    measured = measure_norm(spec.norm, x, x_protected)
    if spec.kind == ProtectionKind.ONE_PIXEL:
        return measured, measured == 1.0
    return measured, measured <= spec.epsilon + BUDGET_TOLERANCE


# --- Gaussian pre-processing ---------------------------------------------

@dataclass
class Preprocess:
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ProtectionError(f"beta must lie in [0, 1], got {self.beta}")

    def to_dict(self):
        return to_plain(self)


def preprocess(pp, x_protected, seed=None):
    """G_beta(x') = sqrt(1 - beta) x' + sqrt(beta) z; not clamped."""
    x = np.asarray(x_protected, dtype=np.float32)
    if pp.beta == 0.0:
        return x
    gen = make_generator(pp.seed if seed is None else seed)
    z = torch.randn(x.shape, generator=gen, dtype=torch.float32).numpy()
    return (np.sqrt(1.0 - pp.beta) * x + np.sqrt(pp.beta) * z).astype(np.float32)


def preprocess_dataset(pp, images, ids):
    """G_beta with an independent noise stream per image id."""
    images = np.asarray(images, dtype=np.float32)
    if pp.beta == 0.0:
        return images
    out = np.empty_like(images)
    for i, image_id in enumerate(ids):
        out[i] = preprocess(pp, images[i], seed=derive_seed(pp.seed, f"preprocess:{image_id}"))
    return out
