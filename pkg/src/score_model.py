"""
Endpoint-conditioned denoiser and its training loop.

The network predicts the clean endpoint x0_hat from (x_t, x_end, t); the score
of the bridge is recovered analytically from x0_hat. Training minimizes the
bridge denoising loss on aligned (clean, protected) pairs and keeps an
exponential moving average of the weights for evaluation.

Checkpoint file layout (little-endian):
    b'BPCK1\\n'
    uint32  header length
    header  canonical JSON (schedule, network, precondition, config hash, step, seed, tensors)
    per tensor, in header order:
        uint16 name length, name (utf-8), uint8 ndim, uint32 x ndim dims, float32 data
"""
import enum
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.optim.swa_utils import AveragedModel
from tqdm import tqdm

from bridge_math import NoiseSchedule, analytic_bridge_score, bridge_coefficients, broadcast_to
from config import canonical_json, config_hash, from_dict, make_generator, progress_enabled, to_plain
from errors import ArchiveError, ConfigurationError, TrainingFault
from networks import build_denoiser, count_parameters

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'BPCK1\n'


class LossWeighting(str, enum.Enum):
    X0 = 'x0'
    SCORE = 'score'
    PRECOND = 'precond'


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 256
    learning_rate: float = 1e-4
    weighting: LossWeighting = LossWeighting.X0
    time_sampling: str = 'uniform'
    t_pad: float = 1e-3
    ema_decay: float = 0.999
    checkpoint_every: int = 10_000
    grad_clip: float = 1.0
    seed: int = 0
    network: str = 'unet'
    network_kwargs: dict = field(default_factory=dict)
    precondition: bool = True
    sigma_data: float = 0.25
    sigma_data_end: float = 0.25
    data_cov: float = 0.0
    data_center: float = 0.5
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    log_every: int = 100

    def __post_init__(self):
        if not isinstance(self.weighting, LossWeighting):
            self.weighting = LossWeighting(self.weighting)
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1", key='steps')
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1", key='batch_size')
        if not self.t_pad > 0:
            raise ConfigurationError("t_pad must be > 0", key='t_pad')
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in (0, 1)", key='ema_decay')
        if self.time_sampling != 'uniform':
            raise ConfigurationError(f"unsupported time_sampling '{self.time_sampling}'", key='time_sampling')
        if self.weighting == LossWeighting.PRECOND and not self.precondition:
            raise ConfigurationError("weighting 'precond' requires precondition=true", key='weighting')

    @property
    def t_low(self):
        return self.schedule.t_min

    @property
    def t_high(self):
        return self.schedule.t_max - self.t_pad * self.schedule.t_max

    @classmethod
    def from_dict(cls, data, key_lines=None):
        return from_dict(cls, data, key_lines)

    def to_dict(self):
        return to_plain(self)


@dataclass(frozen=True)
class Preconditioning:
    """
    Scalings of the bridge denoiser computed from data statistics:
    x0_hat = c_skip * xt~ + c_out * F(c_in * xt~, x_end~ / sigma_data_end, t),
    with ~ denoting centered values.
    """
    sigma_data: float = 0.25
    sigma_data_end: float = 0.25
    cov: float = 0.0
    center: float = 0.5

    def coefficients(self, schedule, t):
        m = bridge_coefficients(schedule, t)
        m0, mT, var = m.mean_coeff_x0, m.mean_coeff_xT, m.variance
        s0, sT, cov = self.sigma_data ** 2, self.sigma_data_end ** 2, self.cov
        a = mT ** 2 * sT + m0 ** 2 * s0 + 2 * m0 * mT * cov + var
        c_in = 1.0 / torch.sqrt(a)
        c_skip = (m0 * s0 + mT * cov) / a
        c_out = torch.sqrt((mT ** 2 * (s0 * sT - cov ** 2) + s0 * var).clamp_min(0.0)) / torch.sqrt(a)
        return c_in, c_skip, c_out, m0 + mT


def time_feature(schedule, t, batch):
    """(B,) float32 network time input, 1000 * t / T."""
    tt = schedule.as_time(t)
    if tt.ndim == 0:
        tt = tt.expand(batch)
    return (1000.0 * tt / schedule.t_max).float()


class ScoreModel:
    """Denoiser network + EMA shadow + optimizer state for a given schedule."""

    def __init__(self, network, schedule, precondition=None, ema_decay=0.999,
                 network_name=None, network_kwargs=None):
        self.network = network
        self.schedule = schedule
        self.precondition = precondition
        self.ema_decay = ema_decay
        self.network_name = network_name
        self.network_kwargs = dict(network_kwargs or {})
        self.ema = AveragedModel(network, avg_fn=self._ema_avg, use_buffers=True)
        self.optimizer = None
        self.step = 0
        self.history = []
        self.config_hash = None
        self.seed = None
        self.checkpoint_path = None

    def _ema_avg(self, averaged, current, num_averaged):
        return self.ema_decay * averaged + (1.0 - self.ema_decay) * current

    @property
    def param_count(self):
        return count_parameters(self.network)

    @property
    def device(self):
        return next(self.network.parameters()).device

    def to(self, device):
        self.network.to(device)
        self.ema.to(device)
        return self

    def eval(self):
        """Inference mode for both networks (dropout off)."""
        self.network.eval()
        self.ema.eval()
        return self

    def configure_optimizer(self, learning_rate):
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=learning_rate)
        return self.optimizer

    def denoise(self, x_t, x_end, t, use_ema=True):
        """Predicted clean endpoint x0_hat, same shape as x_t."""
        net = self.ema.module if use_ema else self.network
        t_feat = time_feature(self.schedule, t, x_t.shape[0]).to(x_t.device)
        if self.precondition is None:
            return net(x_t, x_end, t_feat)
        pc = self.precondition
        c_in, c_skip, c_out, mean_scale = pc.coefficients(self.schedule, t)
        xt_c = x_t - broadcast_to(mean_scale, x_t) * pc.center
        end_c = (x_end - pc.center) / pc.sigma_data_end
        out = net(broadcast_to(c_in, x_t) * xt_c, end_c, t_feat)
        return pc.center + broadcast_to(c_skip, x_t) * xt_c + broadcast_to(c_out, x_t) * out


def build_score_model(cfg, channels, image_size=None):
    """Fresh ScoreModel for cfg; weights initialized from cfg.seed."""
    kwargs = dict(cfg.network_kwargs)
    if cfg.network == 'unet':
        kwargs.setdefault('channels', channels)
    elif cfg.network == 'mlp':
        kwargs.setdefault('dim', channels * (image_size or 1) ** 2 if image_size else channels)
    torch.manual_seed(cfg.seed)
    net = build_denoiser(cfg.network, **kwargs)
    precondition = None
    if cfg.precondition:
        precondition = Preconditioning(cfg.sigma_data, cfg.sigma_data_end, cfg.data_cov, cfg.data_center)
    model = ScoreModel(net, cfg.schedule, precondition, cfg.ema_decay, cfg.network, kwargs)
    model.config_hash = config_hash(cfg)
    model.seed = cfg.seed
    return model


def predict_score(model, x_t, x_end, t):
    """Bridge score s_theta(x_t, x_end, t) reconstructed from the EMA x0_hat."""
    x0_hat = model.denoise(x_t, x_end, t, use_ema=True)
    return analytic_bridge_score(model.schedule, x_t, t, x0_hat, x_end)


def denoising_loss(model, x0, x_end, t, noise, weighting=LossWeighting.X0, use_ema=False):
    """
    Bridge denoising loss for explicit times and noise (no randomness inside).
    t is a (B,) tensor.
    """
    weighting = LossWeighting(weighting)
    m = bridge_coefficients(model.schedule, t)
    x_t = (broadcast_to(m.mean_coeff_x0, x0) * x0 + broadcast_to(m.mean_coeff_xT, x0) * x_end
           + torch.sqrt(broadcast_to(m.variance, x0)) * noise)
    x0_hat = model.denoise(x_t, x_end, t, use_ema=use_ema)
    per_sample = ((x0_hat - x0) ** 2).reshape(x0.shape[0], -1).mean(dim=1)
    if weighting == LossWeighting.SCORE:
        # score error = m0 * (x0_hat - x0) / var
        w = (m.mean_coeff_x0 / m.variance) ** 2
        per_sample = per_sample * w.to(per_sample)
    elif weighting == LossWeighting.PRECOND:
        _, _, c_out, _ = model.precondition.coefficients(model.schedule, t)
        per_sample = per_sample / (c_out ** 2).clamp_min(1e-12).to(per_sample)
    return per_sample.mean()


def sample_times(cfg, batch, gen):
    u = torch.rand(batch, generator=gen, dtype=torch.float64)
    return cfg.t_low + (cfg.t_high - cfg.t_low) * u


def training_step(model, batch, cfg, seed, batch_id=None):
    """
    One optimizer update on a batch of aligned (x0, x_end) tensors.
    Returns the loss as a python float.
    """
    x0, x_end = batch
    if x0.shape[0] == 0:
        raise ConfigurationError("empty training batch")
    if x0.shape != x_end.shape:
        raise ConfigurationError(f"misaligned batch: {tuple(x0.shape)} vs {tuple(x_end.shape)}")
    if model.optimizer is None:
        model.configure_optimizer(cfg.learning_rate)

    gen = make_generator(seed)
    t = sample_times(cfg, x0.shape[0], gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype).to(x0.device)

    model.network.train()
    model.optimizer.zero_grad(set_to_none=True)
    loss = denoising_loss(model, x0, x_end, t, noise, cfg.weighting)
    if not torch.isfinite(loss):
        raise TrainingFault(
            f"non-finite loss at step {model.step} (batch {batch_id}), t in "
            f"[{t.min().item():.4g}, {t.max().item():.4g}]",
            step=model.step, batch_id=batch_id, times=t.tolist())
    loss.backward()
    if cfg.grad_clip and cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.network.parameters(), cfg.grad_clip)
    model.optimizer.step()
    model.ema.update_parameters(model.network)
    model.step += 1
    value = loss.item()
    model.history.append(value)
    return value


def _pair_tensors(pairs):
    """(clean, protected) float32 tensors from a PairArchive or an array tuple."""
    if hasattr(pairs, 'clean') and hasattr(pairs, 'protected'):
        clean, protected = pairs.clean, pairs.protected
    else:
        clean, protected = pairs
    clean = torch.as_tensor(np.asarray(clean, dtype=np.float32))
    protected = torch.as_tensor(np.asarray(protected, dtype=np.float32))
    if clean.shape != protected.shape:
        raise ConfigurationError(f"pair shapes differ: clean {tuple(clean.shape)} vs protected {tuple(protected.shape)}")
    if clean.shape[0] < 1:
        raise ConfigurationError("cannot fit on an empty pair set")
    return clean, protected


def fit(pairs, cfg, checkpoint_dir=None, device=None, model=None, callback=None):
    """
    Train a ScoreModel on aligned pairs.

    Writes step-XXXXXXX.bpck every cfg.checkpoint_every steps and model.bpck at
    the end when checkpoint_dir is given. `callback(model, step)` runs after
    every checkpoint interval.
    """
    clean, protected = _pair_tensors(pairs)
    channels = clean.shape[1] if clean.ndim > 1 else 1
    image_size = clean.shape[-1] if clean.ndim == 4 else None
    if model is None:
        model = build_score_model(cfg, channels, image_size)
    device = device or torch.device('cpu')
    model.to(device)
    model.configure_optimizer(cfg.learning_rate)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    n = clean.shape[0]
    logger.info(f"Training {model.network_name or 'custom'} denoiser ({model.param_count:,} params) "
                f"on {n} pairs for {cfg.steps} steps")
    order_gen = make_generator(cfg.seed)
    start = time.time()
    running = []
    for step in tqdm(range(cfg.steps), desc='train', disable=not progress_enabled(), leave=False):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=order_gen)
        batch = (clean[idx].to(device), protected[idx].to(device))
        loss = training_step(model, batch, cfg, seed=cfg.seed * 1_000_003 + step, batch_id=step)
        running.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.debug(f"step {step + 1}: loss={np.mean(running):.6f}")
            running = []
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < cfg.steps:
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir / f"step-{step + 1:07d}.bpck", model)
            if callback is not None:
                callback(model, step + 1)

    if checkpoint_dir is not None:
        model.checkpoint_path = checkpoint_dir / 'model.bpck'
        save_checkpoint(model.checkpoint_path, model)
    if callback is not None:
        callback(model, cfg.steps)
    logger.info(f"✅ Training finished in {time.time() - start:.1f}s, final loss {model.history[-1]:.6f}")
    return model


# --- Checkpoint format ----------------------------------------------------

def _named_tensors(model):
    tensors = {}
    for name, value in model.network.state_dict().items():
        tensors[f"net.{name}"] = value
    for name, value in model.ema.state_dict().items():
        tensors[f"ema.{name}"] = value
    return dict(sorted(tensors.items()))


def save_checkpoint(path, model, meta=None):
    """Write model to path in the single-file checkpoint format."""
    path = Path(path)
    tensors = _named_tensors(model)
    header = {
        'format': 1,
        'schedule': model.schedule.to_dict(),
        'network': {'name': model.network_name, 'kwargs': to_plain(model.network_kwargs)},
        'precondition': to_plain(model.precondition) if model.precondition is not None else None,
        'ema_decay': model.ema_decay,
        'config_hash': model.config_hash,
        'step': model.step,
        'seed': model.seed,
        'meta': to_plain(meta or {}),
        'tensors': [{'name': k, 'dtype': str(v.dtype).replace('torch.', '')} for k, v in tensors.items()],
    }
    header_bytes = canonical_json(header).encode('utf-8')
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(header_bytes)))
        f.write(header_bytes)
        for name, value in tensors.items():
            name_bytes = name.encode('utf-8')
            shape = tuple(value.shape)
            f.write(struct.pack('<H', len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack('<B', len(shape)))
            f.write(struct.pack(f'<{len(shape)}I', *shape))
            f.write(value.detach().cpu().numpy().astype('<f4').tobytes())
    tmp.replace(path)
    logger.debug(f"Checkpoint written: {path} (step {model.step})")
    return path


def read_checkpoint(path):
    """Parse a checkpoint into (header, {name: float32 ndarray})."""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ArchiveError(f"{path}: not a BridgePure checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (header_len,) = struct.unpack_from('<I', data, pos)
        pos += 4
        header = json.loads(data[pos:pos + header_len].decode('utf-8'))
        pos += header_len
        arrays = {}
        for entry in header['tensors']:
            (name_len,) = struct.unpack_from('<H', data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode('utf-8')
            pos += name_len
            if name != entry['name']:
                raise ArchiveError(f"{path}: tensor '{name}' out of order (expected '{entry['name']}')")
            (ndim,) = struct.unpack_from('<B', data, pos)
            pos += 1
            shape = struct.unpack_from(f'<{ndim}I', data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(data):
                raise ArchiveError(f"{path}: truncated tensor '{name}'")
            arrays[name] = np.frombuffer(data, dtype='<f4', count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
        raise ArchiveError(f"{path}: corrupt checkpoint ({e})")
    if pos != len(data):
        raise ArchiveError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def load_checkpoint(path, device=None):
    """Rebuild a ScoreModel from a checkpoint file."""
    header, arrays = read_checkpoint(path)
    schedule = from_dict(NoiseSchedule, header['schedule'])
    net_info = header['network']
    if not net_info.get('name'):
        raise ArchiveError(f"{path}: checkpoint does not name its network")
    try:
        net = build_denoiser(net_info['name'], **net_info['kwargs'])
    except (ConfigurationError, TypeError) as e:
        raise ArchiveError(f"{path}: cannot rebuild network ({e})")
    pc = header.get('precondition')
    precondition = Preconditioning(**pc) if pc else None
    model = ScoreModel(net, schedule, precondition, header['ema_decay'], net_info['name'], net_info['kwargs'])
    dtypes = {e['name']: e['dtype'] for e in header['tensors']}

    def _state(prefix, module):
        state = {}
        reference = module.state_dict()
        for key, ref in reference.items():
            full = prefix + key
            if full not in arrays:
                raise ArchiveError(f"{path}: missing tensor '{full}'")
            value = torch.from_numpy(arrays[full])
            if value.shape != ref.shape:
                raise ArchiveError(f"{path}: shape mismatch for '{full}'")
            state[key] = value.to(getattr(torch, dtypes.get(full, 'float32')))
        return state

    model.network.load_state_dict(_state('net.', model.network))
    model.ema.load_state_dict(_state('ema.', model.ema))
    model.step = header['step']
    model.seed = header['seed']
    model.config_hash = header['config_hash']
    model.checkpoint_path = Path(path)
    if device is not None:
        model.to(device)
    return model
