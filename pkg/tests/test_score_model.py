import math

import numpy as np
import pytest
import torch

from bridge_math import NoiseSchedule, analytic_bridge_score
from errors import ArchiveError, ConfigurationError, TrainingFault
from sampler import SamplerConfig, purify
from score_model import (TrainConfig, build_score_model, denoising_loss, fit, load_checkpoint, predict_score,
                         read_checkpoint, save_checkpoint, training_step)


def _mlp_config(**overrides):
    base = dict(network='mlp', network_kwargs={'dim': 4, 'hidden': 8, 'emb_dim': 4}, steps=2, batch_size=4,
                learning_rate=1e-3, checkpoint_every=0, seed=3, schedule=NoiseSchedule(mode='VP'))
    base.update(overrides)
    return TrainConfig(**base)


def _pairs(n=16, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0, 1, size=(n, dim)).astype(np.float32)
    protected = np.clip(clean + rng.uniform(-0.03, 0.03, size=clean.shape), 0, 1).astype(np.float32)
    return clean, protected


def test_zero_head_gives_bridge_score_with_zero_endpoint():
    model = build_score_model(_mlp_config(precondition=False), channels=4)
    for net in (model.network, model.ema.module):
        with torch.no_grad():
            net.net[4].weight.zero_()
            net.net[4].bias.zero_()
    x_t = torch.rand(5, 4)
    x_end = torch.rand(5, 4)
    t = torch.tensor([0.1, 0.3, 0.5, 0.7, 0.9], dtype=torch.float64)
    expected = analytic_bridge_score(model.schedule, x_t, t, torch.zeros_like(x_t), x_end)
    assert torch.allclose(predict_score(model, x_t, x_end, t), expected, rtol=1e-5, atol=1e-6)


def test_perfect_denoiser_has_zero_loss():
    model = build_score_model(_mlp_config(), channels=4)
    x0 = torch.rand(6, 4)
    x_end = torch.rand(6, 4)
    t = torch.linspace(0.1, 0.9, 6, dtype=torch.float64)
    noise = torch.randn(6, 4)
    assert denoising_loss(model, x0, x_end, t, noise).item() > 0
    model.denoise = lambda x_t, x_e, tt, use_ema=True: x0
    for weighting in ('x0', 'score', 'precond'):
        assert denoising_loss(model, x0, x_end, t, noise, weighting).item() == 0.0


def test_loss_gradient_matches_finite_difference():
    cfg = _mlp_config(network_kwargs={'dim': 1, 'hidden': 16, 'emb_dim': 8})
    model = build_score_model(cfg, channels=1)
    assert model.param_count == 465
    model.network.double()
    gen = torch.Generator().manual_seed(7)
    x0 = torch.rand(6, 1, generator=gen, dtype=torch.float64)
    x_end = x0 + 0.05 * torch.randn(6, 1, generator=gen, dtype=torch.float64)
    t = 0.05 + 0.9 * torch.rand(6, generator=gen, dtype=torch.float64)
    noise = torch.randn(6, 1, generator=gen, dtype=torch.float64)
    params = list(model.network.parameters())

    loss = denoising_loss(model, x0, x_end, t, noise, use_ema=False)
    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)])

    eps = 1e-6
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = denoising_loss(model, x0, x_end, t, noise, use_ema=False).item()
                flat[i] = orig - eps
                down = denoising_loss(model, x0, x_end, t, noise, use_ema=False).item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert ((analytic - numeric).norm() / analytic.norm()).item() < 1e-5


def test_training_step_rejects_non_finite_loss():
    cfg = _mlp_config()
    model = build_score_model(cfg, channels=4)
    x0 = torch.rand(4, 4)
    x0[1, 2] = float('nan')
    with pytest.raises(TrainingFault) as info:
        training_step(model, (x0, torch.rand(4, 4)), cfg, seed=1, batch_id=9)
    assert info.value.step == 0
    assert info.value.batch_id == 9


def test_training_step_rejects_misaligned_batch():
    cfg = _mlp_config()
    model = build_score_model(cfg, channels=4)
    with pytest.raises(ConfigurationError):
        training_step(model, (torch.rand(4, 4), torch.rand(3, 4)), cfg, seed=1)


def test_single_step_fit_writes_checkpoint(tmp_path):
    cfg = _mlp_config(steps=1)
    model = fit(_pairs(), cfg, checkpoint_dir=tmp_path)
    assert model.step == 1
    assert len(model.history) == 1 and math.isfinite(model.history[0])
    assert (tmp_path / 'model.bpck').exists()


def test_fit_is_deterministic():
    cfg = _mlp_config(steps=3)
    a = fit(_pairs(), cfg)
    b = fit(_pairs(), cfg)
    for pa, pb in zip(a.network.parameters(), b.network.parameters()):
        assert torch.equal(pa, pb)
    assert a.history == b.history


def test_checkpoint_round_trip(tmp_path):
    cfg = _mlp_config(steps=2)
    model = fit(_pairs(), cfg)
    path = save_checkpoint(tmp_path / 'model.bpck', model, meta={'note': 'unit'})
    header, arrays = read_checkpoint(path)
    assert header['step'] == 2
    assert header['meta'] == {'note': 'unit'}
    assert header['config_hash'] == model.config_hash

    loaded = load_checkpoint(path)
    assert loaded.step == 2 and loaded.schedule == model.schedule
    x_t, x_end = torch.rand(3, 4), torch.rand(3, 4)
    t = torch.tensor([0.2, 0.5, 0.8], dtype=torch.float64)
    for use_ema in (True, False):
        assert torch.equal(loaded.denoise(x_t, x_end, t, use_ema=use_ema),
                           model.denoise(x_t, x_end, t, use_ema=use_ema))


def test_corrupt_checkpoint_is_rejected(tmp_path):
    model = build_score_model(_mlp_config(), channels=4)
    path = save_checkpoint(tmp_path / 'model.bpck', model)
    data = path.read_bytes()
    (tmp_path / 'short.bpck').write_bytes(data[:-10])
    (tmp_path / 'magic.bpck').write_bytes(b'NOPE' + data[4:])
    with pytest.raises(ArchiveError):
        read_checkpoint(tmp_path / 'short.bpck')
    with pytest.raises(ArchiveError):
        read_checkpoint(tmp_path / 'magic.bpck')


def test_config_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(weighting='precond', precondition=False)
    with pytest.raises(ValueError):
        TrainConfig(weighting='l1')


@pytest.mark.slow
def test_linear_gaussian_purification_recovers_posterior_mean():
    """x0 ~ N(0, 1), x_end = x0 + 0.5 + 0.5 z: the deterministic sampler should land on E[x0 | x_end]."""
    offset, tau = 0.5, 0.5
    rng = np.random.default_rng(0)
    clean = rng.standard_normal((20_000, 1))
    protected = clean + offset + tau * rng.standard_normal(clean.shape)
    cfg = TrainConfig(network='mlp', network_kwargs={'dim': 1, 'hidden': 64, 'emb_dim': 16},
                      steps=4000, batch_size=512, learning_rate=1e-3, ema_decay=0.99, checkpoint_every=0,
                      sigma_data=1.0, sigma_data_end=math.sqrt(1 + tau ** 2), data_cov=1.0, data_center=0.0,
                      schedule=NoiseSchedule(mode='VP'), seed=0)
    model = fit((clean, protected), cfg)

    x_end = torch.linspace(-1.5, 2.5, 200).reshape(-1, 1)
    out = purify(model, x_end, SamplerConfig(steps=40, s=0.0, guidance=1.0, clamp=False))
    posterior_mean = (x_end - offset) / (1 + tau ** 2)
    rmse = torch.sqrt(((out - posterior_mean) ** 2).mean()).item()
    # 5% of the posterior-mean spread (sd ~ 0.894)
    assert rmse < 0.045
