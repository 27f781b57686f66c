"""
Per-image fidelity metrics and summary statistics.
"""
import logging

import numpy as np
import pandas as pd
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

# Gaussian-weighted SSIM with an 11x11 window (sigma 1.5), K1=0.01, K2=0.03, data range 1.0
SSIM_SIGMA = 1.5


def psnr(reference, candidate):
    """PSNR in dB for images in [0, 1]; zero-MSE pairs are capped at 100 dB."""
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    mse = np.mean((ref - cand) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(peak_signal_noise_ratio(ref, cand, data_range=1.0), PSNR_CAP_DB))


def ssim(reference, candidate):
    """Mean SSIM of two (C, H, W) images, averaged over channels."""
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    return float(structural_similarity(
        ref, cand,
        data_range=1.0,
        channel_axis=0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
    ))


def fidelity_table(reference_set, candidate_set):
    """Per-image PSNR/SSIM for two id-aligned ImageSets."""
    rows = []
    for image_id, ref, cand in zip(reference_set.ids, reference_set.images, candidate_set.images):
        rows.append({'id': image_id, 'psnr': psnr(ref, cand), 'ssim': ssim(ref, cand)})
    return pd.DataFrame(rows, columns=['id', 'psnr', 'ssim'])


def summarize(values):
    """mean/std/median/min/max of a 1-D sample (std is n/a below two values)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {'count': 0, 'mean': None, 'std': None, 'median': None, 'min': None, 'max': None}
    return {
        'count': int(values.size),
        'mean': float(values.mean()),
        'std': float(values.std(ddof=1)) if values.size >= 2 else None,
        'median': float(np.median(values)),
        'min': float(values.min()),
        'max': float(values.max()),
    }
