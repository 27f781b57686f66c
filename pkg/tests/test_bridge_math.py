import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridge_math import (NoiseSchedule, ScheduleMode, analytic_bridge_score, bridge_coefficients,
                         bridge_marginal, drift, h_function, sample_bridge_state, transition_kernel)
from errors import ScheduleDomainError, SingularTimeError

VE = NoiseSchedule(mode=ScheduleMode.VE)
VP = NoiseSchedule(mode=ScheduleMode.VP)
# sigma(T)^2 = 0.25 * (9 - 1) = 2
UNIT_VE = NoiseSchedule(mode=ScheduleMode.VE, sigma_min=0.5, sigma_max=1.5)


def _kernel_oracle(schedule, t):
    """(a, b^2) straight from alpha and the accumulated variance."""
    a = schedule.alpha(schedule.t_max) / schedule.alpha(t)
    b2 = schedule.variance(schedule.t_max) - a ** 2 * schedule.variance(t)
    return a, b2


def _posterior_oracle(schedule, t, x0, x_end):
    """Gaussian conditioning of x_t on x_T for x_t = alpha x0 + sigma z1, x_T = a x_t + b z2."""
    a, b2 = _kernel_oracle(schedule, t)
    alpha_t, var_t = schedule.alpha(t), schedule.variance(t)
    a, b2, alpha_t, var_t = (v[:, None] for v in (a, b2, alpha_t, var_t))
    total = a ** 2 * var_t + b2
    mean = alpha_t * x0 + (a * var_t / total) * (x_end - a * alpha_t * x0)
    var = var_t * b2 / total
    return mean, var


def _central_difference(logp, x, eps=1e-5):
    grad = torch.empty_like(x)
    for d in range(x.shape[1]):
        step = torch.zeros_like(x)
        step[:, d] = eps
        grad[:, d] = (logp(x + step) - logp(x - step)) / (2 * eps)
    return grad


def _relative_error(approx, exact):
    return ((approx - exact).norm(dim=1) / exact.norm(dim=1).clamp_min(1e-300)).max().item()


def test_ve_drift_is_zero():
    x = torch.randn(4, 3, dtype=torch.float64)
    assert torch.equal(drift(VE, x, 0.5), torch.zeros_like(x))


def test_vp_drift_formula():
    constant = NoiseSchedule(mode='vp', beta_min_rate=0.2, beta_max_rate=0.2)
    out = drift(constant, torch.tensor([1.0], dtype=torch.float64), 0.3)
    assert out.item() == pytest.approx(-0.1, abs=1e-15)
    assert drift(constant, torch.zeros(2, dtype=torch.float64), 0.3).abs().max().item() == 0.0


def test_time_outside_domain_is_rejected():
    x = torch.zeros(1, dtype=torch.float64)
    with pytest.raises(ScheduleDomainError):
        drift(VE, x, 1.5)
    with pytest.raises(ScheduleDomainError):
        bridge_marginal(VP, x, x, -0.1)


def test_schedule_shapes():
    t = torch.linspace(0, 1, 101, dtype=torch.float64)
    assert torch.all(torch.diff(VE.variance(t)) > 0)
    assert torch.all(torch.diff(VP.variance(t)) > 0)
    assert torch.all(torch.diff(VP.alpha(t)) < 0)
    assert VP.alpha(0.0).item() == 1.0
    assert torch.equal(VE.alpha(t), torch.ones_like(t))
    assert VE.variance(0.0).item() == 0.0


@pytest.mark.parametrize('schedule', [VE, VP, UNIT_VE], ids=['ve', 'vp', 'unit-ve'])
def test_time_at_variance_inverts_variance(schedule):
    t = torch.tensor([0.01, 0.2, 0.5, 0.9], dtype=torch.float64)
    back = schedule.time_at_variance(schedule.variance(t))
    assert torch.allclose(back, t, rtol=1e-10, atol=1e-12)


def test_ve_kernel_closed_form():
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    a, b2 = transition_kernel(VE, t)
    assert torch.equal(a, torch.ones_like(t))
    assert torch.allclose(b2, VE.variance(1.0) - VE.variance(t), rtol=1e-14)
    _, b2_end = transition_kernel(VE, 1.0)
    assert b2_end.item() == 0.0


def test_h_function_example():
    t = UNIT_VE.time_at_variance(1.0)
    h = h_function(UNIT_VE, torch.tensor([0.0], dtype=torch.float64), t, torch.tensor([1.0], dtype=torch.float64))
    assert h.item() == pytest.approx(1.0, rel=1e-10)


def test_h_function_vanishes_at_endpoint_value():
    x = torch.randn(5, 3, dtype=torch.float64)
    assert torch.equal(h_function(VE, x, 0.4, x), torch.zeros_like(x))


def test_h_function_singular_at_T():
    x = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(SingularTimeError):
        h_function(VE, x, 1.0, x)


@pytest.mark.parametrize('schedule', [VE, VP], ids=['ve', 'vp'])
def test_h_function_matches_finite_difference(schedule):
    gen = torch.Generator().manual_seed(0)
    n = 1000
    t = 0.05 + 0.9 * torch.rand(n, generator=gen, dtype=torch.float64)
    x_t = torch.randn(n, 3, generator=gen, dtype=torch.float64)
    x_end = torch.randn(n, 3, generator=gen, dtype=torch.float64)
    a, b2 = _kernel_oracle(schedule, t)

    def log_kernel(x):
        return -((x_end - a[:, None] * x) ** 2).sum(dim=1) / (2 * b2)

    assert _relative_error(h_function(schedule, x_t, t, x_end), _central_difference(log_kernel, x_t)) < 1e-4


@pytest.mark.parametrize('schedule', [VE, VP], ids=['ve', 'vp'])
def test_bridge_score_matches_finite_difference(schedule):
    gen = torch.Generator().manual_seed(1)
    n = 1000
    t = 0.05 + 0.9 * torch.rand(n, generator=gen, dtype=torch.float64)
    x0 = torch.rand(n, 3, generator=gen, dtype=torch.float64)
    x_end = torch.rand(n, 3, generator=gen, dtype=torch.float64)
    mean, var = _posterior_oracle(schedule, t, x0, x_end)
    x_t = mean + var.sqrt() * torch.randn(n, 3, generator=gen, dtype=torch.float64)

    def log_density(x):
        return -((x - mean) ** 2 / (2 * var)).sum(dim=1)

    score = analytic_bridge_score(schedule, x_t, t, x0, x_end)
    assert _relative_error(score, _central_difference(log_density, x_t)) < 1e-4


def test_bridge_marginal_example():
    t = UNIT_VE.time_at_variance(1.0)
    mean, var = bridge_marginal(UNIT_VE, torch.tensor([0.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64), t)
    assert mean.item() == pytest.approx(1.0, rel=1e-10)
    assert var.item() == pytest.approx(0.5, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(x0=arrays(np.float64, (2, 4), elements=st.floats(-5, 5)),
       x_end=arrays(np.float64, (2, 4), elements=st.floats(-5, 5)),
       mode=st.sampled_from(['VE', 'VP']))
def test_endpoint_pinning(x0, x_end, mode):
    schedule = NoiseSchedule(mode=mode)
    x0, x_end = torch.from_numpy(x0), torch.from_numpy(x_end)
    mean0, var0 = bridge_marginal(schedule, x0, x_end, 0.0)
    meanT, varT = bridge_marginal(schedule, x0, x_end, schedule.t_max)
    assert torch.equal(mean0, x0) and var0.item() == 0
    assert torch.equal(meanT, x_end) and varT.item() == 0


def test_bridge_score_is_zero_at_mean_and_linear():
    x0 = torch.rand(3, 2, dtype=torch.float64)
    x_end = torch.rand(3, 2, dtype=torch.float64)
    mean, _ = bridge_marginal(VP, x0, x_end, 0.3)
    assert torch.allclose(analytic_bridge_score(VP, mean, 0.3, x0, x_end), torch.zeros_like(mean), atol=1e-12)
    offset = torch.randn(3, 2, dtype=torch.float64)
    s1 = analytic_bridge_score(VP, mean + offset, 0.3, x0, x_end)
    s2 = analytic_bridge_score(VP, mean + 2 * offset, 0.3, x0, x_end)
    assert torch.allclose(s2, 2 * s1, rtol=1e-12)


@pytest.mark.parametrize('t', [0.0, 1.0])
def test_bridge_score_singular_at_endpoints(t):
    x = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(SingularTimeError):
        analytic_bridge_score(VE, x, t, x, x)


def test_sample_bridge_state_pinned_and_deterministic():
    x0 = torch.rand(4, 3, dtype=torch.float64)
    x_end = torch.rand(4, 3, dtype=torch.float64)
    assert torch.equal(sample_bridge_state(VE, x0, x_end, 0.0, seed=5), x0)
    a = sample_bridge_state(VE, x0, x_end, 0.4, seed=5)
    b = sample_bridge_state(VE, x0, x_end, 0.4, seed=5)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_bridge_state(VE, x0, x_end, 0.4, seed=6))


def test_ve_vp_consistency_when_alpha_is_one():
    flat = NoiseSchedule(mode=ScheduleMode.VP, beta_min_rate=1e-9, beta_max_rate=1e-9)
    t = torch.tensor([0.1, 0.3, 0.5, 0.7, 0.9], dtype=torch.float64)
    assert torch.allclose(flat.alpha(t), torch.ones_like(t), atol=1e-8)
    v, v_T = flat.variance(t), flat.variance(1.0)
    m = bridge_coefficients(flat, t)
    # VE closed forms evaluated on the same accumulated variance
    assert torch.allclose(m.mean_coeff_x0, 1 - v / v_T, atol=1e-6)
    assert torch.allclose(m.mean_coeff_xT, v / v_T, atol=1e-6)
    assert torch.allclose(m.variance / v_T, (v * (v_T - v) / v_T) / v_T, atol=1e-6)


def test_sample_bridge_state_moments():
    n = 100_000
    x0 = torch.zeros(n, dtype=torch.float64)
    x_end = torch.full((n,), 2.0, dtype=torch.float64)
    t = UNIT_VE.time_at_variance(1.0)
    draws = sample_bridge_state(UNIT_VE, x0, x_end, t, seed=3)
    se_mean = math.sqrt(0.5 / n)
    se_var = 0.5 * math.sqrt(2.0 / (n - 1))
    assert abs(draws.mean().item() - 1.0) < 4 * se_mean
    assert abs(draws.var().item() - 0.5) < 4 * se_var


@pytest.mark.slow
def test_pinned_sde_simulation_matches_bridge_marginal():
    """Euler-Maruyama on dx = (f + g^2 h) dt + g dW reproduces the closed-form marginal."""
    schedule = UNIT_VE
    n, dt = 100_000, 1e-3
    gen = torch.Generator().manual_seed(2024)
    x = torch.zeros(n, dtype=torch.float64)
    x_end = torch.full((n,), 2.0, dtype=torch.float64)
    x0 = torch.zeros(n, dtype=torch.float64)
    checkpoints = {200: 0.2, 400: 0.4, 500: 0.5, 600: 0.6, 800: 0.8}
    for k in range(1, 801):
        t = (k - 1) * dt
        g2 = schedule.g2(t).item()
        d = drift(schedule, x, t) + g2 * h_function(schedule, x, t, x_end)
        x = x + d * dt + math.sqrt(g2 * dt) * torch.randn(n, generator=gen, dtype=torch.float64)
        if k in checkpoints:
            mean, var = bridge_marginal(schedule, x0[:1], x_end[:1], checkpoints[k])
            var = var.item()
            assert abs(x.mean().item() - mean.item()) < 4 * math.sqrt(var / n)
            assert abs(x.var().item() - var) < 4 * var * math.sqrt(2.0 / (n - 1))
