"""Long-video inference over overlapping windows.

A video is split into windows of ``window_len`` frames advancing by
``stride = window_len - overlap``. Overlapping frames start from the same
initial noise in every window that covers them. After each denoising step
the overlap latents of consecutive windows are blended with
position-based weights, so neighbouring windows converge together.

Execution contract: inside one timestep the per-window denoiser calls
are independent (they are batched here); the fusion between timesteps is
a sequential barrier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import kernels
from .diffusion import Conditioning, NoiseSchedule, ddim_step, sample, sampling_timesteps
from .errors import ConfigError, ContractError
from .video import LatentSequence

FUSION_MODES = ("per_step", "final", "none")
NOISE_MODES = ("shared", "reorder", "independent")


@dataclass
class WindowPlan:
    total_frames: int
    window_len: int
    stride: int
    overlap: int
    windows: list  # [(start, [frame indices])]
    noise_assignment: list  # per window, pool index for each frame
    pool_size: int

    @property
    def starts(self) -> list:
        return [w[0] for w in self.windows]

    def actual_overlap(self, i: int) -> int:
        return self.starts[i] + self.window_len - self.starts[i + 1]

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.total_frames, dtype=int)
        for _, idx in self.windows:
            cov[idx] += 1
        return cov


def fusion_weights(P: int) -> np.ndarray:
    """alpha_j = 1 - j / (P - 1) for j in [0, P)."""
    if P < 2:
        raise ContractError(f"fusion needs an overlap of at least 2 frames, got {P}")
    # one rounding per entry: (P - 1 - j) / (P - 1) is exact at the endpoints
    return (P - 1 - np.arange(P, dtype=np.float64)) / (P - 1)


def plan_windows(total_frames: int, window_len: int, overlap: int, noise_mode: str = "shared", seed: int = 0) -> WindowPlan:
    """Lay windows on the stride lattice; a ragged tail gets one right-aligned window."""
    if window_len < 2 or not 1 <= overlap < window_len or total_frames < window_len:
        raise ContractError(
            f"invalid window geometry: T={total_frames}, window_len={window_len}, overlap={overlap}"
        )
    if noise_mode not in NOISE_MODES:
        raise ConfigError(f"unknown noise mode {noise_mode!r}; expected one of {NOISE_MODES}")
    stride = window_len - overlap
    starts = list(range(0, total_frames - window_len + 1, stride))
    if starts[-1] + window_len < total_frames:
        starts.append(total_frames - window_len)
    windows = [(s, list(range(s, s + window_len))) for s in starts]

    rng = np.random.default_rng(seed)
    assignment = [list(range(window_len))]
    next_index = window_len
    for k in range(1, len(starts)):
        prev = assignment[-1]
        shift = starts[k] - starts[k - 1]
        if noise_mode == "independent":
            assignment.append(list(range(next_index, next_index + window_len)))
            next_index += window_len
            continue
        reused = prev[shift:]
        if noise_mode == "shared":
            fresh = list(range(next_index, next_index + shift))
            next_index += shift
        else:
            # reuse the initial pool entries not already taken by the overlap, in shuffled order
            taken = set(reused)
            fresh = [int(i) for i in rng.permutation(window_len) if int(i) not in taken][:shift]
        assignment.append(reused + fresh)
    return WindowPlan(total_frames, window_len, stride, overlap, windows, assignment, next_index)


class NoisePool:
    """Lazily grown, immutable per-index noise tensors."""

    def __init__(self, seed: int, shape: tuple, dtype=torch.float32):
        self.seed = int(seed)
        self.shape = tuple(shape)
        self.dtype = dtype
        self._frames: dict = {}

    def __getitem__(self, i: int) -> torch.Tensor:
        if i not in self._frames:
            s = int(np.random.SeedSequence([self.seed, int(i)]).generate_state(1)[0])
            t = torch.randn(self.shape, generator=torch.Generator().manual_seed(s), dtype=self.dtype)
            self._frames[i] = t
        return self._frames[i]

    def stack(self, indices) -> torch.Tensor:
        return torch.stack([self[i] for i in indices])


def _blend(a: torch.Tensor, b: torch.Tensor, alpha: np.ndarray, backend=None) -> torch.Tensor:
    P = a.shape[0]
    if a.dtype == torch.float32 and a.device.type == "cpu":
        out = kernels.blend_rows(a.reshape(P, -1).numpy(), b.reshape(P, -1).numpy(), alpha, backend=backend)
        return torch.from_numpy(out).view(a.shape)
    w = torch.as_tensor(alpha, dtype=torch.float64, device=a.device).view(-1, *([1] * (a.ndim - 1)))
    return (w * a.double() + (1 - w) * b.double()).to(a.dtype)


def fuse_overlap(F_i: LatentSequence, F_next: LatentSequence, plan: WindowPlan, i: int, backend=None) -> torch.Tensor:
    """fused[j] = alpha_j * F_i[s + j] + (1 - alpha_j) * F_next[j]; written into both windows."""
    if F_i.t != F_next.t:
        raise ContractError(f"cannot fuse windows at different timesteps ({F_i.t} vs {F_next.t})")
    s = plan.starts[i + 1] - plan.starts[i]
    P = plan.actual_overlap(i)
    alpha = fusion_weights(P)
    with torch.no_grad():
        fused = _blend(F_i.z[s : s + P].detach(), F_next.z[:P].detach(), alpha, backend)
        F_i.z[s : s + P] = fused
        F_next.z[:P] = fused
    return fused


def _canonicalize(zs: torch.Tensor, plan: WindowPlan) -> None:
    """Make every window agree with the last window covering each frame."""
    owner = {}
    for k, (start, idx) in enumerate(plan.windows):
        for j, f in enumerate(idx):
            owner[f] = (k, j)
    for k, (start, idx) in enumerate(plan.windows):
        for j, f in enumerate(idx):
            ok, oj = owner[f]
            if ok != k:
                zs[k, j] = zs[ok, oj]


def _assemble(zs: torch.Tensor, plan: WindowPlan) -> torch.Tensor:
    out = torch.empty((plan.total_frames,) + tuple(zs.shape[2:]), dtype=zs.dtype)
    for k, (start, idx) in enumerate(plan.windows):
        out[start : start + plan.window_len] = zs[k]
    return out


def _fuse_all(zs: torch.Tensor, plan: WindowPlan, t, backend=None) -> None:
    for i in range(len(plan.windows) - 1):
        fuse_overlap(LatentSequence(zs[i], t), LatentSequence(zs[i + 1], t), plan, i, backend)
    _canonicalize(zs, plan)


def make_condition(lr: torch.Tensor, sched: NoiseSchedule, tau: int, seed: int, embed=None) -> Conditioning:
    """Noise the whole LR video once, so every window sees the same x_tau per frame."""
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 7919]).generate_state(1)[0]))
    eps = torch.randn(lr.shape, generator=g, dtype=lr.dtype)
    x_tau = sched.a(tau) * lr + sched.s(tau) * eps
    return Conditioning(x_tau, int(tau), torch.zeros(0) if embed is None else embed)


def default_tau(sched: NoiseSchedule) -> int:
    return int(0.05 * sched.timesteps)


def _latent_shape(model, lr):
    return (model.cfg.latent_channels,) + tuple(lr.shape[-2:])


@torch.no_grad()
def plain_restore(lr, model, vae, sched, *, seed=0, steps=20, tau=None, embed=None) -> torch.Tensor:
    """Single-window reference path: the shared sampler run on the whole clip."""
    tau = default_tau(sched) if tau is None else tau
    cond = make_condition(lr, sched, tau, seed, embed)
    pool = NoisePool(seed, _latent_shape(model, lr))
    z = sample(model, cond, pool.stack(range(lr.shape[0])), sched, steps)
    return vae.decode(z)


@torch.no_grad()
def restore_video(lr: torch.Tensor, model, vae, sched: NoiseSchedule, *, window_len: int = 8, overlap: int = 4,
                  seed: int = 0, steps: int = 20, fusion: str = "per_step", noise: str = "shared",
                  tau: Optional[int] = None, embed=None, return_latents: bool = False, backend=None):
    """Restore a (T, 3, h, w) LR clip to (T, 3, 4h, 4w) with overlapping windows."""
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")
    if lr.ndim != 4:
        raise ContractError("expected a (T, 3, h, w) LR clip")
    T = lr.shape[0]
    if T < window_len:
        raise ContractError(f"clip has {T} frames, fewer than window_len={window_len}")
    plan = plan_windows(T, window_len, overlap, noise, seed)
    n = len(plan.windows)
    if fusion != "none" and n > 1 and min(plan.actual_overlap(i) for i in range(n - 1)) < 2:
        raise ContractError("fusion needs overlaps of at least 2 frames")
    tau = default_tau(sched) if tau is None else tau
    cond_full = make_condition(lr, sched, tau, seed, embed)
    pool = NoisePool(seed, _latent_shape(model, lr))

    zs = torch.stack([pool.stack(a) for a in plan.noise_assignment])
    x = torch.stack([cond_full.lr_latent[s : s + window_len] for s in plan.starts])
    cond = Conditioning(x, cond_full.tau, cond_full.embed)
    ts = sampling_timesteps(sched, steps)
    for k, t in enumerate(ts):
        t_next = ts[k + 1] if k + 1 < len(ts) else None
        v = model(zs, cond, torch.full((n,), t))
        zs = ddim_step(zs, v, t, t_next, sched)
        if fusion == "per_step" and n > 1:
            _fuse_all(zs, plan, t_next, backend)
    if fusion == "final" and n > 1:
        _fuse_all(zs, plan, None, backend)
    latents = _assemble(zs, plan)
    out = vae.decode(latents)
    if return_latents:
        return out, latents, plan
    return out
