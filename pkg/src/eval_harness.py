"""
Availability and fidelity measurements.

train_and_score retrains classifiers on a (protected / purified / clean)
training set and scores them on the clean test set; image_fidelity compares
two id-aligned image sets with PSNR/SSIM; augmentation_baseline produces the
cheap circumvention baselines (blur, grayscale, JPEG, bit-depth reduction).
"""
import io
import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from tqdm import tqdm

from config import derive_seed, from_dict, get_device, make_generator, progress_enabled, to_plain
from errors import AlignmentError, ConfigurationError, TrainingFault
from imagesets import quantize
from metrics import fidelity_table, summarize
from networks import build_classifier

logger = logging.getLogger(__name__)

CLASSIFIERS = ('resnet', 'resnet-small', 'linear-probe')
AUGMENTATIONS = ('gaussian-blur', 'grayscale', 'jpeg', 'bit-depth')


@dataclass
class EvalConfig:
    classifier: str = 'resnet'
    epochs: int = 120
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: List[float] = field(default_factory=lambda: [2 / 3, 5 / 6])
    lr_gamma: float = 0.1
    batch_size: int = 128
    trials: int = 5
    augment: bool = True
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ConfigurationError(f"classifier must be one of {CLASSIFIERS}", key='classifier')
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1", key='trials')
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if any(not 0 < m < 1 for m in self.lr_milestones):
            raise ConfigurationError("lr_milestones are fractions of the epoch budget in (0, 1)",
                                     key='lr_milestones')

    @classmethod
    def from_dict(cls, data, key_lines=None):
        return from_dict(cls, data, key_lines)

    def to_dict(self):
        return to_plain(self)


@dataclass
class EvalReport:
    accuracy_mean: Optional[float]
    accuracy_std: Optional[float]
    trial_accuracies: List[float]
    failed_trials: List[int]
    per_class_accuracy: dict
    class_frequencies: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return to_plain(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['per_class_accuracy'] = {int(k): v for k, v in data['per_class_accuracy'].items()}
        data['class_frequencies'] = {int(k): v for k, v in data['class_frequencies'].items()}
        return cls(**data)

    def class_subset_accuracy(self, classes):
        """Mean of the per-class accuracies over `classes` present in the test set."""
        values = [self.per_class_accuracy[c] for c in classes if c in self.per_class_accuracy]
        return float(np.mean(values)) if values else None


# --- Classifier training ----------------------------------------------------

def _augment(x, gen):
    """Random 4-pixel-padded crop and horizontal flip, per sample."""
    b, _, h, w = x.shape
    padded = F.pad(x, (4, 4, 4, 4), mode='reflect')
    oy = torch.randint(0, 9, (b,), generator=gen)
    ox = torch.randint(0, 9, (b,), generator=gen)
    rows = (oy[:, None] + torch.arange(h)[None, :]).to(x.device)
    cols = (ox[:, None] + torch.arange(w)[None, :]).to(x.device)
    batch_idx = torch.arange(b, device=x.device)[:, None, None, None]
    chan_idx = torch.arange(x.shape[1], device=x.device)[None, :, None, None]
    out = padded[batch_idx, chan_idx, rows[:, None, :, None], cols[:, None, None, :]]
    flip = (torch.rand(b, generator=gen) < 0.5).to(x.device)
    return torch.where(flip[:, None, None, None], out.flip(-1), out)


def _predict_torch(model, x, device, batch_size=512):
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = torch.as_tensor(x[start:start + batch_size], device=device)
            preds.append(model((xb - 0.5) / 0.25).argmax(dim=1).cpu().numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _train_torch_classifier(x, y, num_classes, cfg, seed, device):
    torch.manual_seed(seed)
    gen = make_generator(seed)
    model = build_classifier(cfg.classifier, x.shape[1], num_classes).to(device)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    milestones = sorted({max(1, int(round(m * cfg.epochs))) for m in cfg.lr_milestones})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=cfg.lr_gamma)
    xt = torch.as_tensor(x)
    yt = torch.as_tensor(y, dtype=torch.long)
    n = len(xt)
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = xt[idx].to(device)
            if cfg.augment and xb.shape[-1] > 8:
                xb = _augment(xb, gen)
            loss = F.cross_entropy(model((xb - 0.5) / 0.25), yt[idx].to(device))
            if not torch.isfinite(loss):
                raise TrainingFault(f"classifier loss diverged at epoch {epoch}", step=epoch, batch_id=start)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        scheduler.step()
    return model


def _fit_predict(x, y, x_test, num_classes, cfg, seed, device):
    """Train one classifier and return predictions on x_test."""
    classes = np.unique(y)
    if len(classes) == 1:
        return np.full(len(x_test), classes[0], dtype=np.int64)
    if cfg.classifier == 'linear-probe':
        clf = LogisticRegression(max_iter=1000, random_state=seed % (2 ** 32))
        clf.fit(x.reshape(len(x), -1), y)
        return clf.predict(x_test.reshape(len(x_test), -1)).astype(np.int64)
    model = _train_torch_classifier(x, y, num_classes, cfg, seed, device)
    return _predict_torch(model, x_test, device)


# Worker globals, loaded once per process by the pool initializer
_worker_data = None


def _init_worker(x, y, x_test, num_classes, cfg, device_name):
    global _worker_data
    torch.set_num_threads(1)
    _worker_data = (x, y, x_test, num_classes, cfg, torch.device(device_name))


def _run_trial_worker(trial_seed):
    x, y, x_test, num_classes, cfg, device = _worker_data
    try:
        return _fit_predict(x, y, x_test, num_classes, cfg, trial_seed, device), None
    except TrainingFault as e:
        return None, str(e)


def train_and_score(dataset, test_set, cfg, device=None):
    """Mean/std test accuracy and per-class accuracy over cfg.trials classifiers."""
    if len(dataset) == 0 or len(test_set) == 0:
        raise ConfigurationError("train_and_score needs non-empty training and test sets")
    if dataset.shape != test_set.shape:
        raise AlignmentError(f"training images {dataset.shape} and test images {test_set.shape} differ")
    device = get_device(device) if not isinstance(device, torch.device) else device
    x, y = dataset.images, dataset.labels
    x_test, y_test = test_set.images, test_set.labels
    num_classes = int(max(y.max(), y_test.max())) + 1
    seeds = [derive_seed(cfg.seed, f"trial-{k}") for k in range(cfg.trials)]

    if cfg.workers > 1 and cfg.trials > 1:
        ctx = mp.get_context('spawn')
        with ctx.Pool(processes=min(cfg.workers, cfg.trials), initializer=_init_worker,
                      initargs=(x, y, x_test, num_classes, cfg, str(device))) as pool:
            outcomes = pool.map(_run_trial_worker, seeds)
    else:
        outcomes = []
        for s in tqdm(seeds, desc='trials', disable=not progress_enabled(), leave=False):
            try:
                outcomes.append((_fit_predict(x, y, x_test, num_classes, cfg, s, device), None))
            except TrainingFault as e:
                outcomes.append((None, str(e)))

    accuracies, failed, per_class_runs = [], [], []
    test_classes = sorted(int(c) for c in np.unique(y_test))
    for k, (pred, error) in enumerate(outcomes):
        if pred is None:
            logger.warning(f"⚠️  Trial {k} failed: {error}")
            failed.append(k)
            continue
        correct = pred == y_test
        accuracies.append(float(correct.mean() * 100.0))
        per_class_runs.append({c: float(correct[y_test == c].mean() * 100.0) for c in test_classes})

    per_class = {c: float(np.mean([run[c] for run in per_class_runs])) for c in test_classes} if per_class_runs else {}
    freq = {c: float(np.mean(y_test == c)) for c in test_classes}
    report = EvalReport(
        accuracy_mean=float(np.mean(accuracies)) if accuracies else None,
        accuracy_std=float(np.std(accuracies, ddof=1)) if len(accuracies) >= 2 else None,
        trial_accuracies=accuracies,
        failed_trials=failed,
        per_class_accuracy=per_class,
        class_frequencies=freq,
        provenance={'eval_config': cfg.to_dict(), 'train_size': len(dataset), 'test_size': len(test_set)},
    )
    std = f"{report.accuracy_std:.2f}" if report.accuracy_std is not None else 'n/a'
    mean = f"{report.accuracy_mean:.2f}" if report.accuracy_mean is not None else 'n/a'
    logger.info(f"📊 Accuracy {mean} ± {std} over {len(accuracies)} trials ({len(failed)} failed)")
    return report


# --- Fidelity ---------------------------------------------------------------

@dataclass
class FidelityReport:
    table: pd.DataFrame
    psnr: dict
    ssim: dict

    def to_dict(self):
        return {'psnr': self.psnr, 'ssim': self.ssim}


def image_fidelity(reference_set, candidate_set):
    """Per-image PSNR/SSIM plus summary statistics; sets must be id-aligned."""
    if reference_set.ids != candidate_set.ids:
        raise AlignmentError("reference and candidate sets are not aligned by id")
    if reference_set.shape != candidate_set.shape:
        raise AlignmentError(f"shapes differ: {reference_set.shape} vs {candidate_set.shape}")
    table = fidelity_table(reference_set, candidate_set)
    return FidelityReport(table=table, psnr=summarize(table['psnr']), ssim=summarize(table['ssim']))


# --- Augmentation baselines -------------------------------------------------

def _jpeg(image, quality):
    levels = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    pil = Image.fromarray(levels[0]) if levels.shape[0] == 1 else Image.fromarray(levels.transpose(1, 2, 0))
    buffer = io.BytesIO()
    pil.save(buffer, format='JPEG', quality=quality)
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        arr = np.asarray(decoded, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def augmentation_baseline(dataset, kind, strength=None):
    """Apply a purification-free transform to every image of an ImageSet."""
    images = dataset.images
    if kind == 'gaussian-blur':
        sigma = 1.0 if strength is None else float(strength)
        out = ndimage.gaussian_filter(images, sigma=(0, 0, sigma, sigma))
    elif kind == 'grayscale':
        if images.shape[1] == 3:
            luma = 0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]
            out = np.repeat(luma[:, None], 3, axis=1)
        else:
            out = images.copy()
    elif kind == 'jpeg':
        quality = 10 if strength is None else int(strength)
        out = np.stack([_jpeg(img, quality) for img in images]) if len(images) else images.copy()
    elif kind == 'bit-depth':
        bits = 2 if strength is None else int(strength)
        levels = 2 ** bits - 1
        out = np.round(images * levels) / levels
    else:
        raise ConfigurationError(f"unknown augmentation '{kind}' (choose from {AUGMENTATIONS})")
    return dataset.with_images(quantize(out), augmentation=kind)
