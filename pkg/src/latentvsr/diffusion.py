"""Noise schedule, forward noising, v-prediction targets and a deterministic sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, ContractError, NumericError

SCHEDULE_KINDS = ("cosine", "linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule: alpha[t]**2 + sigma[t]**2 == 1.

    ``t = 0`` is the cleanest step; ``t = timesteps - 1`` the noisiest.
    """

    timesteps: int
    alpha: np.ndarray
    sigma: np.ndarray
    schedule_kind: str = "cosine"

    def check(self) -> None:
        if len(self.alpha) != self.timesteps or len(self.sigma) != self.timesteps:
            raise ContractError("alpha/sigma length must equal timesteps")
        if np.max(np.abs(self.alpha**2 + self.sigma**2 - 1.0)) > 1e-6:
            raise ContractError("schedule is not variance preserving")
        if np.any(np.diff(self.alpha) > 0) or np.any(np.diff(self.sigma) < 0):
            raise ContractError("alpha must be non-increasing and sigma non-decreasing")
        if np.any(self.alpha <= 0) or np.any(self.alpha > 1) or np.any(self.sigma < 0) or np.any(self.sigma >= 1):
            raise ContractError("alpha must lie in (0, 1] and sigma in [0, 1)")

    def a(self, t: int) -> float:
        return float(self.alpha[t])

    def s(self, t: int) -> float:
        return float(self.sigma[t])

    def valid(self, t: int) -> bool:
        return 0 <= int(t) < self.timesteps

    def to_dict(self) -> dict:
        return {"kind": self.schedule_kind, "timesteps": self.timesteps}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(d["kind"], int(d["timesteps"]))


def build_schedule(kind: str, timesteps: int) -> NoiseSchedule:
    if timesteps < 2:
        raise ContractError("a schedule needs at least 2 timesteps")
    t = np.arange(timesteps, dtype=np.float64)
    if kind == "cosine":
        # angle 0 at t=0 (clean), just short of pi/2 at the last step
        angle = 0.5 * math.pi * t / timesteps
        alpha, sigma = np.cos(angle), np.sin(angle)
    elif kind == "linear":
        scale = 1000.0 / timesteps
        betas = np.clip(np.linspace(scale * 1e-4, scale * 0.02, timesteps), 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
        alpha, sigma = np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    sched = NoiseSchedule(timesteps, alpha, sigma, kind)
    sched.check()
    return sched


@dataclass
class LatentSample:
    z: torch.Tensor
    t: int
    epsilon: Optional[torch.Tensor] = None


@dataclass
class Conditioning:
    """Noised low-resolution input plus a generic conditioning vector.

    ``lr_latent`` is x_tau, shape (T, 3, h, w) or (B, T, 3, h, w), at the
    latent resolution.
    """

    lr_latent: torch.Tensor
    tau: int
    embed: torch.Tensor = field(default_factory=lambda: torch.zeros(0))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(values: np.ndarray, t, ref: torch.Tensor) -> torch.Tensor | float:
    """Scalar coefficient for an int t, or a per-batch column for a tensor t."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.as_tensor(values[t.cpu().numpy()], dtype=ref.dtype, device=ref.device)
        return c.view(-1, *([1] * (ref.ndim - 1)))
    return float(values[int(t)])


def forward_noise(z: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> LatentSample:
    """z_t = alpha_t * z + sigma_t * eps. ``t`` may be an int or a per-batch tensor."""
    _check_same_shape(z, eps, "forward_noise")
    if not isinstance(t, torch.Tensor) and not sched.valid(t):
        raise ContractError(f"timestep {t} outside [0, {sched.timesteps})")
    zt = _coef(sched.alpha, t, z) * z + _coef(sched.sigma, t, z) * eps
    return LatentSample(zt, t, eps)


def v_target(z: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z, eps, "v_target")
    return _coef(sched.alpha, t, z) * eps - _coef(sched.sigma, t, z) * z


def predict_clean(zt: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    return _coef(sched.alpha, t, zt) * zt - _coef(sched.sigma, t, zt) * v


def predict_noise(zt: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    return _coef(sched.sigma, t, zt) * zt + _coef(sched.alpha, t, zt) * v


def diffusion_loss(pred_v: torch.Tensor, z: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the predicted and the true v."""
    _check_same_shape(pred_v, z, "diffusion_loss")
    if not (torch.isfinite(pred_v).all() and torch.isfinite(z).all() and torch.isfinite(eps).all()):
        raise NumericError("non-finite input to diffusion_loss")
    return torch.mean((pred_v - v_target(z, eps, t, sched)) ** 2)


def noise_condition(lr: torch.Tensor, tau: int, eps: torch.Tensor, sched: NoiseSchedule, embed=None) -> Conditioning:
    """x_tau = alpha_tau * lr + sigma_tau * eps."""
    _check_same_shape(lr, eps, "noise_condition")
    x_tau = sched.a(tau) * lr + sched.s(tau) * eps
    return Conditioning(x_tau, int(tau), torch.zeros(0) if embed is None else embed)


def tau_range(sched: NoiseSchedule, frac: float = 0.15) -> tuple[int, int]:
    """Inclusive range of early timesteps used to noise the low-resolution input."""
    hi = max(0, int(math.floor(frac * sched.timesteps)) - 1)
    return 0, hi


def sampling_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    if not 1 <= steps <= sched.timesteps:
        raise ContractError(f"steps must lie in [1, {sched.timesteps}], got {steps}")
    ts = np.round(np.linspace(sched.timesteps - 1, 0, steps)).astype(int)
    return [int(t) for t in ts]


def ddim_step(zt: torch.Tensor, v: torch.Tensor, t: int, t_next: Optional[int], sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic update from t to t_next; ``t_next=None`` means the clean endpoint."""
    _check_same_shape(zt, v, "denoiser output")
    z0 = predict_clean(zt, v, t, sched)
    if t_next is None:
        return z0
    eps = predict_noise(zt, v, t, sched)
    return sched.a(t_next) * z0 + sched.s(t_next) * eps


Denoiser = Callable[[torch.Tensor, Conditioning, int], torch.Tensor]


@torch.no_grad()
def sample(denoiser: Denoiser, cond: Conditioning, init_noise: torch.Tensor, sched: NoiseSchedule, steps: int) -> torch.Tensor:
    """Run the deterministic v-parameterized sampler from pure noise to t=0.

    ``init_noise`` is taken as the latent at the noisiest timestep.
    """
    ts = sampling_timesteps(sched, steps)
    z = init_noise
    for k, t in enumerate(ts):
        v = denoiser(z, cond, t)
        z = ddim_step(z, v, t, ts[k + 1] if k + 1 < len(ts) else None, sched)
    return z
