"""
Closed-form mathematics of pinned linear diffusions.

A schedule defines the linear SDE  dx = f(t) x dt + g(t) dW  through two
accumulated quantities: the signal scale alpha(t) = exp(int_0^t f) and the
accumulated variance var(t), so that x_t | x_0 ~ N(alpha(t) x_0, var(t)).

Everything else (transition kernel to the endpoint, Doob h-function, bridge
marginal and its score) follows from those two functions and is valid for
both the VE and the VP family.

Times may be python floats or 1-D tensors with one entry per batch element;
coefficients broadcast over the remaining image dimensions.
"""
import enum
import logging
import math
from dataclasses import dataclass

import torch

from config import make_generator
from errors import ScheduleDomainError, SingularTimeError

logger = logging.getLogger(__name__)


class ScheduleMode(str, enum.Enum):
    VE = 'VE'
    VP = 'VP'

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value == value.upper():
                    return member
        return None


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Drift/diffusion pair of the forward SDE.

    VE: alpha = 1, var(t) = sigma_min^2 * ((sigma_max/sigma_min)^(2t/T) - 1).
    VP: beta(t) linear from beta_min_rate to beta_max_rate,
        alpha(t) = exp(-1/2 int beta), var(t) = 1 - alpha(t)^2.
    """
    mode: ScheduleMode = ScheduleMode.VE
    t_max: float = 1.0
    t_min: float = 1e-3
    sigma_min: float = 0.01
    sigma_max: float = 40.0
    beta_min_rate: float = 0.1
    beta_max_rate: float = 2.1

    def __post_init__(self):
        if not isinstance(self.mode, ScheduleMode):
            object.__setattr__(self, 'mode', ScheduleMode(self.mode))
        if not (0.0 < self.t_min < self.t_max):
            raise ValueError(f"need 0 < t_min < t_max, got t_min={self.t_min}, t_max={self.t_max}")
        if self.mode == ScheduleMode.VE:
            if not (0.0 < self.sigma_min < self.sigma_max):
                raise ValueError("need 0 < sigma_min < sigma_max")
        else:
            if self.beta_min_rate < 0 or self.beta_max_rate < self.beta_min_rate:
                raise ValueError("need 0 <= beta_min_rate <= beta_max_rate")
            if self.beta_max_rate <= 0:
                raise ValueError("VP schedule needs a positive beta_max_rate")

    @property
    def T(self):
        return self.t_max

    @property
    def default_guidance(self):
        return 0.5 if self.mode == ScheduleMode.VE else 1.0

    # -- time handling ----------------------------------------------------

    def as_time(self, t):
        """float64 tensor of times, checked against [0, T]."""
        if isinstance(t, torch.Tensor):
            tt = t.detach().to(dtype=torch.float64, device='cpu')
        else:
            tt = torch.tensor(float(t), dtype=torch.float64)
        if not bool(torch.isfinite(tt).all()):
            raise ScheduleDomainError("time must be finite")
        if bool((tt < 0).any()) or bool((tt > self.t_max).any()):
            raise ScheduleDomainError(
                f"time outside [0, {self.t_max}]: min={tt.min().item():.6g}, max={tt.max().item():.6g}")
        return tt

    # -- schedule quantities (float64) --------------------------------------

    def _log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def integrated_beta(self, t):
        """int_0^t beta(u) du for VP; zero for VE."""
        tt = self.as_time(t)
        if self.mode == ScheduleMode.VE:
            return torch.zeros_like(tt)
        k = self.beta_max_rate - self.beta_min_rate
        return self.beta_min_rate * tt + 0.5 * k * tt ** 2 / self.t_max

    def beta_rate(self, t):
        tt = self.as_time(t)
        if self.mode == ScheduleMode.VE:
            return torch.zeros_like(tt)
        k = self.beta_max_rate - self.beta_min_rate
        return self.beta_min_rate + k * tt / self.t_max

    def alpha(self, t):
        return torch.exp(-0.5 * self.integrated_beta(t))

    def variance(self, t):
        """Accumulated variance var(t) = sigma(t)^2 of x_t given x_0."""
        tt = self.as_time(t)
        if self.mode == ScheduleMode.VE:
            return self.sigma_min ** 2 * torch.expm1(2.0 * self._log_ratio() * tt / self.t_max)
        return -torch.expm1(-self.integrated_beta(tt))

    def sigma(self, t):
        return torch.sqrt(self.variance(t))

    def drift_coef(self, t):
        """f(t) with drift f(x, t) = f(t) * x."""
        return -0.5 * self.beta_rate(t)

    def g2(self, t):
        """Squared diffusion coefficient g(t)^2."""
        tt = self.as_time(t)
        if self.mode == ScheduleMode.VE:
            rate = 2.0 * self._log_ratio() / self.t_max
            return self.sigma_min ** 2 * rate * torch.exp(rate * tt)
        return self.beta_rate(tt)

    def time_at_variance(self, v):
        """Inverse of the (strictly increasing) accumulated variance."""
        vv = torch.as_tensor(v, dtype=torch.float64)
        if self.mode == ScheduleMode.VE:
            t = self.t_max * torch.log1p(vv / self.sigma_min ** 2) / (2.0 * self._log_ratio())
        else:
            big_b = -torch.log1p(-vv)
            k = self.beta_max_rate - self.beta_min_rate
            if k == 0:
                t = big_b / self.beta_min_rate
            else:
                c = k / self.t_max
                t = (-self.beta_min_rate + torch.sqrt(self.beta_min_rate ** 2 + 2.0 * c * big_b)) / c
        if bool((t < 0).any()) or bool((t > self.t_max * (1 + 1e-12)).any()):
            raise ScheduleDomainError(f"variance {v} is not reached on [0, {self.t_max}]")
        return t.clamp(0.0, self.t_max)

    def to_dict(self):
        return {
            'mode': self.mode.value, 't_max': self.t_max, 't_min': self.t_min,
            'sigma_min': self.sigma_min, 'sigma_max': self.sigma_max,
            'beta_min_rate': self.beta_min_rate, 'beta_max_rate': self.beta_max_rate,
        }


@dataclass(frozen=True)
class BridgeMarginal:
    """q(x_t | x_0, x_T): mean = mean_coeff_x0 * x_0 + mean_coeff_xT * x_T."""
    mean_coeff_x0: torch.Tensor
    mean_coeff_xT: torch.Tensor
    variance: torch.Tensor


@dataclass(frozen=True)
class BridgeKernel:
    """Gaussian transition kernel p(x_T | x_t) = N(a x_t, b^2) of a schedule."""
    schedule: NoiseSchedule

    def coefficients(self, t):
        """(a(t->T), b^2(t->T)) as float64 tensors."""
        s = self.schedule
        tt = s.as_time(t)
        if s.mode == ScheduleMode.VE:
            a = torch.ones_like(tt)
            b2 = s.variance(s.t_max) - s.variance(tt)
        else:
            dB = s.integrated_beta(s.t_max) - s.integrated_beta(tt)
            a = torch.exp(-0.5 * dB)
            b2 = -torch.expm1(-dB)
        return a, b2

    def marginal(self, t):
        s = self.schedule
        tt = s.as_time(t)
        a, b2 = self.coefficients(tt)
        var_t = s.variance(tt)
        var_T = s.variance(s.t_max)
        return BridgeMarginal(
            mean_coeff_x0=s.alpha(tt) * b2 / var_T,
            mean_coeff_xT=a * var_t / var_T,
            variance=var_t * b2 / var_T,
        )


def broadcast_to(coef, x):
    """Reshape a scalar or (B,) coefficient so it broadcasts against x."""
    coef = torch.as_tensor(coef)
    if coef.ndim == 1 and x.ndim >= 1:
        coef = coef.reshape((-1,) + (1,) * (x.ndim - 1))
    return coef.to(dtype=x.dtype, device=x.device)


def transition_kernel(schedule, t):
    return BridgeKernel(schedule).coefficients(t)


def bridge_coefficients(schedule, t):
    return BridgeKernel(schedule).marginal(t)


def drift(schedule, x, t):
    """Forward drift f(x, t): zero for VE, -1/2 beta(t) x for VP."""
    return broadcast_to(schedule.drift_coef(t), x) * x


def h_function(schedule, x_t, t, x_end):
    """
    Doob h-function grad_{x_t} log p(x_T = x_end | x_t) = a (x_end - a x_t) / b^2.
    """
    tt = schedule.as_time(t)
    a, b2 = transition_kernel(schedule, tt)
    if bool((b2 <= 0).any()):
        raise SingularTimeError(f"h-function is singular at t={tt.max().item():.6g} (T={schedule.t_max})")
    a_x = broadcast_to(a, x_t)
    return a_x * (x_end - a_x * x_t) / broadcast_to(b2, x_t)


def bridge_marginal(schedule, x_0, x_end, t):
    """Mean tensor and variance (scalar or per-batch) of q(x_t | x_0, x_T = x_end)."""
    m = bridge_coefficients(schedule, t)
    mean = broadcast_to(m.mean_coeff_x0, x_0) * x_0 + broadcast_to(m.mean_coeff_xT, x_0) * x_end
    return mean, m.variance


def sample_bridge_state(schedule, x_0, x_end, t, seed):
    """Draw x_t ~ q(x_t | x_0, x_end); reproducible for an int seed or generator state."""
    mean, var = bridge_marginal(schedule, x_0, x_end, t)
    gen = make_generator(seed)
    z = torch.randn(x_0.shape, generator=gen, dtype=x_0.dtype).to(x_0.device)
    return mean + torch.sqrt(broadcast_to(var, x_0)) * z


def analytic_bridge_score(schedule, x_t, t, x_0, x_end):
    """grad_{x_t} log q(x_t | x_0, x_end) = (mean - x_t) / variance."""
    mean, var = bridge_marginal(schedule, x_0, x_end, t)
    if bool((var <= 0).any()):
        raise SingularTimeError("bridge score is singular at the pinned endpoints t=0 and t=T")
    return (mean - x_t) / broadcast_to(var, x_t)
