"""
Linear variance schedule and closed-form diffusion algebra.

Timesteps are 1-indexed in every public function (``t = 1..T``); ``t = 0``
denotes clean data and is rejected where a noising step is required.
Arrays are stored 0-indexed, so ``betas[t - 1]`` is the variance of step ``t``.

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, StepError


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    t_test: int = 500

    def validate(self) -> None:
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"diffusion.T must be a positive integer, got {self.T}")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise ConfigError(
                "diffusion bounds must satisfy 0 < beta_min <= beta_max < 1, "
                f"got beta_min={self.beta_min}, beta_max={self.beta_max}"
            )
        if not 1 <= self.t_test <= self.T:
            raise ConfigError(f"diffusion.t_test must lie in [1, T={self.T}], got {self.t_test}")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed float64 schedule arrays of length ``T`` (read-only)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_step(self, t) -> None:
        tt = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if tt.size == 0:
            return
        if not np.issubdtype(tt.dtype, np.integer):
            if not np.all(tt == np.round(tt)):
                raise StepError(f"timesteps must be integers, got {t!r}")
        if tt.min() < 1 or tt.max() > self.T:
            raise StepError(f"timestep out of range [1, {self.T}]: {t!r}")

    def beta(self, t: int) -> float:
        self.check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Signal fraction after ``t`` steps; ``alpha_bar(0)`` is 1 (clean data)."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])


def build_linear_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    cfg.validate()
    T = int(cfg.T)
    if T == 1:
        betas = np.array([cfg.beta_min], dtype=np.float64)
    else:
        betas = np.linspace(cfg.beta_min, cfg.beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _gather(values: np.ndarray, t, like):
    """Pick ``values[t - 1]`` shaped to broadcast against ``like``.

    ``t`` may be a scalar or a per-sample vector (leading batch axis).
    """
    if isinstance(like, torch.Tensor):
        if isinstance(t, torch.Tensor):
            idx = t.detach().to("cpu", torch.long) - 1
        else:
            idx = torch.as_tensor(np.asarray(t), dtype=torch.long) - 1
        out = torch.tensor(values)[idx]
        out = out.to(device=like.device, dtype=like.dtype)
        return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))
    t_arr = np.asarray(t)
    out = values[t_arr - 1]
    if t_arr.ndim:
        out = out.reshape(out.shape + (1,) * (np.ndim(like) - out.ndim))
        return out.astype(np.result_type(like, np.float32), copy=False)
    return float(out)


def forward_diffuse(x0, eps, t, sched: NoiseSchedule):
    """Sample ``x_t`` given clean data and a noise draw of the same shape."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    sched.check_step(t)
    ab = _gather(sched.alpha_bars, t, x0)
    if isinstance(x0, torch.Tensor):
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(x_t, eps0, t, sched: NoiseSchedule):
    """Mean of q(x_{t-1} | x_t, x0) parameterised through the noise vector."""
    if tuple(x_t.shape) != tuple(eps0.shape):
        raise ValueError(f"x_t and eps0 shapes differ: {tuple(x_t.shape)} vs {tuple(eps0.shape)}")
    sched.check_step(t)
    a = _gather(sched.alphas, t, x_t)
    b = _gather(sched.betas, t, x_t)
    ab = _gather(sched.alpha_bars, t, x_t)
    if isinstance(x_t, torch.Tensor):
        return (x_t - b / torch.sqrt(1.0 - ab) * eps0) / torch.sqrt(a)
    return (x_t - b / np.sqrt(1.0 - ab) * eps0) / np.sqrt(a)


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    """Fixed reverse-process variance; ``beta_1`` at ``t = 1`` by convention."""
    sched.check_step(t)
    if t == 1:
        return float(sched.betas[0])
    ab_prev = sched.alpha_bars[t - 2]
    ab = sched.alpha_bars[t - 1]
    return float((1.0 - ab_prev) / (1.0 - ab) * sched.betas[t - 1])
