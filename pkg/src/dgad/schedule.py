"""Linear noise schedule, forward noising, reverse sampler steps and
classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

X0_CLIP = 3.0
# 1000-step linear betas (1e-4..0.02) rescaled by 1000/T for T=100, so alpha_bar[T-1] ~ 3e-5
# and sampling from pure noise matches what the model saw in training
DEFAULT_T = 100
DEFAULT_BETA = (1e-3, 0.2)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")


def make_linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0], beta_end: float = DEFAULT_BETA[1]) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar)


def add_noise(f_tgt: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) * f_tgt + sqrt(1 - abar_t) * eps; ``t`` is an int or a per-sample [B] tensor."""
    if f_tgt.shape != eps.shape:
        raise ValueError(f"add_noise: shapes differ {tuple(f_tgt.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= s.T):
            raise ValueError(f"add_noise: timesteps outside [0, {s.T})")
        ab = torch.as_tensor(s.alpha_bar, dtype=f_tgt.dtype)[t].view(-1, *([1] * (f_tgt.dim() - 1)))
        return ab.sqrt() * f_tgt + (1 - ab).sqrt() * eps
    t = int(t)
    s.check_t(t)
    ab = float(s.alpha_bar[t])
    return np.sqrt(ab) * f_tgt + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"cfg_combine: shapes differ {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if scale == 1:
        return eps_cond.clone()
    if scale == 0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def predict_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, s: NoiseSchedule,
               clip: Optional[float] = X0_CLIP) -> torch.Tensor:
    ab = float(s.alpha_bar[t])
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
    return x0


def sampler_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, s: NoiseSchedule, mode: str = "ddim",
                 rng: Optional[torch.Generator] = None, t_prev: Optional[int] = None) -> torch.Tensor:
    """One reverse step from ``t`` to ``t_prev`` (default ``t - 1``; ``-1`` means x0).

    ``ddim`` is the deterministic eta=0 update. ``ddpm`` samples the Gaussian
    posterior; sigma is zero on the final step.
    """
    s.check_t(t)
    if t_prev is None:
        t_prev = t - 1
    if not -1 <= t_prev < t:
        raise ValueError(f"sampler_step: t_prev={t_prev} must lie in [-1, {t})")
    x0 = predict_x0(x_t, eps_pred, t, s)
    ab_t = float(s.alpha_bar[t])
    ab_prev = 1.0 if t_prev < 0 else float(s.alpha_bar[t_prev])
    if mode == "ddim":
        return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_pred
    if mode != "ddpm":
        raise ValueError(f"unknown sampler mode {mode!r}")
    beta_t = 1.0 - ab_t / ab_prev
    coef_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = np.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * x0 + coef_xt * x_t
    if t_prev < 0:
        return mean
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + np.sqrt(var) * z


def sampling_timesteps(T: int, steps: int) -> List[int]:
    """Descending, de-duplicated timesteps from T-1 to 0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    ts = np.round(np.linspace(T - 1, 0, min(steps, T))).astype(int)
    out: List[int] = []
    for t in ts:
        if not out or t != out[-1]:
            out.append(int(t))
    return out
