"""
Purification engine: integrates the reverse bridge from the protected image
down to t_min.

The first round(s * steps) steps are Euler-Maruyama steps of the reverse SDE,
the remaining steps are Heun steps of the probability-flow ODE. With s = 0 no
noise is ever drawn and the map is deterministic.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from bridge_math import broadcast_to, drift, h_function
from config import derive_seed, from_dict, make_generator, progress_enabled, to_plain
from errors import ConfigurationError, SamplingFault
from score_model import predict_score

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    steps: int = 40
    s: float = 0.33
    guidance: Optional[float] = None
    t_pad: float = 1e-3
    rho: float = 2.0
    seed: int = 0
    clamp: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1", key='steps')
        if not 0.0 <= self.s <= 1.0:
            raise ConfigurationError(f"s must lie in [0, 1], got {self.s}", key='s')
        if not self.t_pad > 0:
            raise ConfigurationError("t_pad must be > 0", key='t_pad')
        if self.rho < 1.0:
            raise ConfigurationError("rho must be >= 1", key='rho')

    @property
    def stochastic_steps(self):
        return int(round(self.s * self.steps))

    def resolved_guidance(self, schedule):
        return schedule.default_guidance if self.guidance is None else self.guidance

    @classmethod
    def from_dict(cls, data, key_lines=None):
        return from_dict(cls, data, key_lines)

    def to_dict(self):
        return to_plain(self)


def time_grid(schedule, steps, t_pad=1e-3, rho=2.0):
    """
    Strictly decreasing float64 grid of steps+1 times from T*(1 - t_pad) to t_min,
    uniform in t^(1/rho).
    """
    t_start = schedule.t_max * (1.0 - t_pad)
    if t_start <= schedule.t_min:
        raise ConfigurationError(f"t_pad={t_pad} leaves no interval above t_min={schedule.t_min}")
    ramp = torch.linspace(0.0, 1.0, steps + 1, dtype=torch.float64)
    lo, hi = schedule.t_min ** (1.0 / rho), t_start ** (1.0 / rho)
    grid = (hi + ramp * (lo - hi)) ** rho
    grid[0], grid[-1] = t_start, schedule.t_min
    return grid


def reverse_drift(model, x_t, x_end, t, guidance, randomness=1.0):
    """
    f - g^2 (w * guidance * s_theta - h), with w = (1 + randomness) / 2:
    w = 1 is the reverse SDE, w = 1/2 the probability-flow ODE.
    """
    schedule = model.schedule
    score_weight = 0.5 * (1.0 + randomness)
    g2 = broadcast_to(schedule.g2(t), x_t)
    h = h_function(schedule, x_t, t, x_end)
    learned = predict_score(model, x_t, x_end, t) if guidance != 0 else torch.zeros_like(x_t)
    return drift(schedule, x_t, t) - g2 * (score_weight * guidance * learned - h)


@dataclass
class PurificationResult:
    images: object
    faults: list = field(default_factory=list)
    batch_seconds: list = field(default_factory=list)


def _image_generators(seed, image_ids):
    return [make_generator(derive_seed(seed, f"purify:{image_id}")) for image_id in image_ids]


def _per_image_noise(generators, shape, dtype, device):
    rows = [torch.randn(shape[1:], generator=g, dtype=dtype) for g in generators]
    return torch.stack(rows).to(device)


def purify(model, x_protected, cfg, image_ids=None, return_trajectory=False, faults=None):
    """
    Purify a batch (B, ...) of protected inputs.

    image_ids keys the per-image noise streams (defaults to batch positions).
    When `faults` is a list, non-finite images are reset to their input,
    recorded as SamplingFault and the rest of the batch continues; otherwise
    the first fault is raised.
    """
    model.eval()
    schedule = model.schedule
    guidance = cfg.resolved_guidance(schedule)
    grid = time_grid(schedule, cfg.steps, cfg.t_pad, cfg.rho)
    n_stochastic = cfg.stochastic_steps
    batch = x_protected.shape[0]
    image_ids = [str(i) for i in range(batch)] if image_ids is None else list(image_ids)
    if len(image_ids) != batch:
        raise ConfigurationError(f"{len(image_ids)} image ids for a batch of {batch}")

    x_end = x_protected
    x = x_protected.clone()
    trajectory = [x.clone()] if return_trajectory else None
    generators = _image_generators(cfg.seed, image_ids) if n_stochastic > 0 else None
    failed = torch.zeros(batch, dtype=torch.bool, device=x.device)

    with torch.no_grad():
        for i in range(cfg.steps):
            t_cur, t_next = grid[i], grid[i + 1]
            dt = (t_next - t_cur).item()
            if i < n_stochastic:
                d = reverse_drift(model, x, x_end, t_cur, guidance, randomness=1.0)
                z = _per_image_noise(generators, x.shape, x.dtype, x.device)
                g = torch.sqrt(broadcast_to(schedule.g2(t_cur), x))
                x_next = x + d * dt + g * (abs(dt) ** 0.5) * z
            else:
                d1 = reverse_drift(model, x, x_end, t_cur, guidance, randomness=0.0)
                x_euler = x + d1 * dt
                d2 = reverse_drift(model, x_euler, x_end, t_next, guidance, randomness=0.0)
                x_next = x + 0.5 * (d1 + d2) * dt

            finite = torch.isfinite(x_next.reshape(batch, -1)).all(dim=1)
            newly_bad = (~finite) & (~failed)
            if bool(newly_bad.any()):
                for idx in torch.nonzero(newly_bad).flatten().tolist():
                    fault = SamplingFault(f"non-finite state at step {i} for image {image_ids[idx]}",
                                          step_index=i, image_id=image_ids[idx])
                    if faults is None:
                        raise fault
                    faults.append(fault)
                failed |= newly_bad
            if bool(failed.any()):
                x_next = torch.where(broadcast_to(failed, x_next).bool(), x_end, x_next)
            x = x_next
            if return_trajectory:
                trajectory.append(x.clone())

    if cfg.clamp:
        x = x.clamp(0.0, 1.0)
    if return_trajectory:
        return x, trajectory
    return x


def purify_dataset(model, dataset, cfg, batch_size=64, inputs=None):
    """
    Purify every image of an ImageSet, batch by batch, preserving order,
    ids and labels. `inputs` optionally overrides the array fed to the
    sampler (e.g. the G_beta pre-processed images) while the metadata still
    comes from `dataset`.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot purify an empty dataset")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    source = dataset.images if inputs is None else inputs
    device = model.device
    ids = dataset.ids
    out = np.empty_like(dataset.images, dtype=np.float32)
    faults = []
    timings = []
    starts = range(0, len(dataset), batch_size)
    for start in tqdm(starts, desc='purify', disable=not progress_enabled(), leave=False):
        stop = min(start + batch_size, len(dataset))
        t0 = time.time()
        xb = torch.as_tensor(np.asarray(source[start:stop], dtype=np.float32), device=device)
        purified = purify(model, xb, cfg, image_ids=ids[start:stop], faults=faults)
        out[start:stop] = purified.cpu().numpy()
        timings.append(time.time() - t0)
        logger.debug(f"purified batch {start}:{stop} in {timings[-1]:.2f}s")
    for fault in faults:
        logger.warning(f"⚠️  {fault} (kept unpurified)")
    logger.info(f"Purified {len(dataset)} images in {sum(timings):.1f}s "
                f"({len(faults)} faults, s={cfg.s}, steps={cfg.steps})")
    return PurificationResult(images=dataset.with_images(out), faults=faults, batch_seconds=timings)
