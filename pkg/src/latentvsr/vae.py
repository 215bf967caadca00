"""Video autoencoders: per-frame 2D, 3D-conv, and 3D-conv + temporal attention.

All variants share one layout and operate on (B, C, T, H, W). The 2D
variant uses temporal kernel size 1, so frames never interact. The 3D
variants use 3x3x3 kernels with replicate padding along time; te3dvae
also has temporal attention at the two lowest-resolution levels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import TemporalBlock
from .errors import ConfigError, ContractError

VARIANTS = ("vae2d", "vae3d", "te3dvae")
# start the posterior nearly deterministic so early training is not swamped by sampling noise
LOGVAR_INIT = -6.0


@dataclass
class VaeConfig:
    latent_channels: int = 4
    downscale: int = 4
    variant: str = "te3dvae"
    kl_weight: float = 1e-6
    adv_weight: float = 0.0
    perceptual_weight: float = 1.0
    base_channels: int = 16
    latent_scale: float = 1.0

    def validate(self) -> "VaeConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown VAE variant {self.variant!r}; expected one of {VARIANTS}")
        if self.downscale < 2 or self.downscale & (self.downscale - 1):
            raise ConfigError("downscale must be a power of two >= 2")
        if min(self.kl_weight, self.adv_weight, self.perceptual_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        return cls(**d).validate()


@dataclass
class VaeLossReport:
    l1: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


class FrameNorm(nn.Module):
    """GroupNorm with statistics per frame."""

    def __init__(self, ch):
        super().__init__()
        self.norm = nn.GroupNorm(4 if ch % 4 == 0 else 1, ch)

    def forward(self, x):
        B, C, T, H, W = x.shape
        y = self.norm(x.transpose(1, 2).reshape(B * T, C, H, W))
        return y.view(B, T, C, H, W).transpose(1, 2)


class VConv(nn.Module):
    """3x3 spatial conv with an optional 3-tap temporal extent."""

    def __init__(self, cin, cout, temporal: bool, stride: int = 1):
        super().__init__()
        kt = 3 if temporal else 1
        self.pad_t = kt // 2
        self.conv = nn.Conv3d(cin, cout, (kt, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1))
        if temporal:
            # inflated init: starts as the per-frame conv, outer taps learn temporal mixing
            with torch.no_grad():
                w = self.conv.weight
                w.zero_()
                nn.init.kaiming_uniform_(w[:, :, 1], a=math.sqrt(5))
                bound = 1.0 / math.sqrt(cin * 9)
                self.conv.bias.uniform_(-bound, bound)

    def forward(self, x):
        if self.pad_t:
            x = F.pad(x, (0, 0, 0, 0, self.pad_t, self.pad_t), mode="replicate")
        return self.conv(x)


class ResBlock3D(nn.Module):
    def __init__(self, cin, cout, temporal):
        super().__init__()
        self.norm1 = FrameNorm(cin)
        self.conv1 = VConv(cin, cout, temporal)
        self.norm2 = FrameNorm(cout)
        self.conv2 = VConv(cout, cout, temporal)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TemporalAttn3D(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = TemporalBlock(ch, 1, heads=1)

    def forward(self, x):
        B, C, T, H, W = x.shape
        y = self.block(x.transpose(1, 2).reshape(B * T, C, H, W), None, T)
        return y.view(B, T, C, H, W).transpose(1, 2)


class _Stage(nn.Module):
    def __init__(self, cin, cout, temporal, attn):
        super().__init__()
        self.res = ResBlock3D(cin, cout, temporal)
        self.attn = TemporalAttn3D(cout) if attn else nn.Identity()

    def forward(self, x):
        return self.attn(self.res(x))


def _unshuffle(x):
    B, C, T, H, W = x.shape
    y = F.pixel_unshuffle(x.transpose(1, 2).reshape(B * T, C, H, W), 2)
    return y.view(B, T, 4 * C, H // 2, W // 2).transpose(1, 2)


def _shuffle(x):
    B, C, T, H, W = x.shape
    y = F.pixel_shuffle(x.transpose(1, 2).reshape(B * T, C, H, W), 2)
    return y.view(B, T, C // 4, 2 * H, 2 * W).transpose(1, 2)


class VideoVAE(nn.Module):
    def __init__(self, cfg: Optional[VaeConfig] = None):
        super().__init__()
        self.cfg = cfg = (cfg or VaeConfig()).validate()
        # pixel-unshuffle by 2 on the way in, pixel-shuffle on the way out
        n_down = int(math.log2(cfg.downscale)) - 1
        temporal = cfg.variant != "vae2d"
        with_attn = cfg.variant == "te3dvae"
        chans = [cfg.base_channels * min(2 ** i, 2) for i in range(n_down + 1)]
        attn_levels = set(range(max(0, n_down - 1), n_down + 1)) if with_attn else set()

        self.enc_in = VConv(12, chans[0], temporal)
        self.enc = nn.ModuleList()
        self.enc_down = nn.ModuleList()
        for i in range(n_down + 1):
            self.enc.append(_Stage(chans[max(i - 1, 0)] if i else chans[0], chans[i], temporal, i in attn_levels))
            if i < n_down:
                self.enc_down.append(VConv(chans[i], chans[i], False, stride=2))
        self.enc_out = nn.Sequential(nn.SiLU(), nn.Conv3d(chans[-1], 2 * cfg.latent_channels, 1))
        with torch.no_grad():
            self.enc_out[-1].bias[cfg.latent_channels:] = LOGVAR_INIT

        self.dec_in = VConv(cfg.latent_channels, chans[-1], temporal)
        self.dec = nn.ModuleList()
        self.dec_up = nn.ModuleList()
        for i in reversed(range(n_down + 1)):
            self.dec.append(_Stage(chans[min(i + 1, n_down)], chans[i], temporal, i in attn_levels))
            if i > 0:
                self.dec_up.append(VConv(chans[i], chans[i], False))
        self.dec_out = nn.Sequential(nn.SiLU(), VConv(chans[0], 12, temporal))

    # -- layout helpers
    @staticmethod
    def _to5d(x, channels):
        unbatched = x.ndim == 4
        if unbatched:
            x = x.unsqueeze(0)
        if x.ndim != 5 or x.shape[2] != channels:
            raise ContractError(f"expected (B, T, {channels}, H, W), got {tuple(x.shape)}")
        return x.transpose(1, 2), unbatched

    @staticmethod
    def _from5d(x, unbatched):
        x = x.transpose(1, 2)
        return x[0] if unbatched else x

    def posterior(self, clip: torch.Tensor):
        """Return (mean, logvar) latents, unscaled, in the clip's layout."""
        H, W = clip.shape[-2:]
        f = self.cfg.downscale
        if H % f or W % f:
            raise ContractError(f"frame size {H}x{W} not divisible by downscale {f}")
        x, unbatched = self._to5d(clip, 3)
        h = self.enc_in(_unshuffle(x * 2.0 - 1.0))
        for i, stage in enumerate(self.enc):
            h = stage(h)
            if i < len(self.enc_down):
                h = self.enc_down[i](h)
        mean, logvar = self.enc_out(h).chunk(2, dim=1)
        return self._from5d(mean, unbatched), self._from5d(logvar.clamp(-20, 10), unbatched)

    def encode(self, clip: torch.Tensor, sample: bool = False, generator=None) -> torch.Tensor:
        """Latents scaled by ``latent_scale``; posterior mean unless ``sample``."""
        mean, logvar = self.posterior(clip)
        z = mean
        if sample:
            z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return z * self.cfg.latent_scale

    def decode(self, lat: torch.Tensor, clamp: bool = True, scaled: bool = True) -> torch.Tensor:
        z = lat / self.cfg.latent_scale if scaled else lat
        x, unbatched = self._to5d(z, self.cfg.latent_channels)
        h = self.dec_in(x)
        for i, stage in enumerate(self.dec):
            h = stage(h)
            if i < len(self.dec_up):
                h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
                h = self.dec_up[i](h)
        out = (_shuffle(self.dec_out(h)) + 1.0) * 0.5
        if clamp:
            out = out.clamp(0.0, 1.0)
        return self._from5d(out, unbatched)

    def forward(self, clip, generator=None):
        mean, logvar = self.posterior(clip)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return self.decode(z, clamp=False, scaled=False), mean, logvar


class TemporalPatchDiscriminator(nn.Module):
    """Four 3D-conv layers producing a patch map of real/fake scores."""

    def __init__(self, ch: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(3, ch, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv3d(ch, 2 * ch, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv3d(2 * ch, 4 * ch, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv3d(4 * ch, 1, 3, padding=1),
        )

    def forward(self, clip):
        x = clip.unsqueeze(0) if clip.ndim == 4 else clip
        return self.net(x.transpose(1, 2) * 2.0 - 1.0)


def hinge_d_loss(real_logits, fake_logits):
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def gradient_maps(x: torch.Tensor):
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def perceptual_proxy(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of horizontal and vertical finite-difference maps."""
    rx, ry = gradient_maps(recon)
    tx, ty = gradient_maps(target)
    dx, dy = (rx - tx).abs(), (ry - ty).abs()
    return (dx.sum() + dy.sum()) / (dx.numel() + dy.numel())


def vae_loss(recon, target, cfg: VaeConfig, posterior=None, disc: Optional[nn.Module] = None) -> VaeLossReport:
    if recon.shape != target.shape:
        raise ContractError(f"vae_loss: shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    zero = recon.new_zeros(())
    l1 = (recon - target).abs().mean()
    perc = perceptual_proxy(recon, target)
    adv = -disc(recon).mean() if (disc is not None and cfg.adv_weight > 0) else zero
    if posterior is not None:
        mean, logvar = posterior
        kl = 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)
    else:
        kl = zero
    total = l1 + cfg.perceptual_weight * perc + cfg.adv_weight * adv + cfg.kl_weight * kl
    return VaeLossReport(l1, perc, adv, kl, total)


def train_vae(vae: VideoVAE, dataset, steps: int, *, batch: int = 2, lr: float = 1e-3, seed: int = 0,
              frames: int = 8, log_every: int = 50, disc: Optional[nn.Module] = None) -> list:
    """Fit the autoencoder on random HR crops; returns [(step, total_loss), ...]."""
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(vae.parameters(), lr=lr, weight_decay=0.0)
    d_opt = torch.optim.AdamW(disc.parameters(), lr=lr) if disc is not None else None
    vae.train()
    history = []
    for step in range(steps):
        clip = torch.stack([dataset.sample_hr(frames, g) for _ in range(batch)])
        recon, mean, logvar = vae(clip, generator=g)
        rep = vae_loss(recon, clip, vae.cfg, (mean, logvar), disc)
        opt.zero_grad()
        rep.total.backward()
        torch.nn.utils.clip_grad_norm_(vae.parameters(), 1.0)
        opt.step()
        if d_opt is not None and vae.cfg.adv_weight > 0:
            d_loss = hinge_d_loss(disc(clip), disc(recon.detach()))
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
        if step % log_every == 0 or step == steps - 1:
            history.append((step, float(rep.total.detach())))
    vae.eval()
    return history


@torch.no_grad()
def calibrate_latent_scale(vae: VideoVAE, clips: torch.Tensor) -> float:
    """Set ``latent_scale`` so encoded latents have unit standard deviation."""
    vae.cfg.latent_scale = 1.0
    std = float(vae.encode(clips).std())
    vae.cfg.latent_scale = 1.0 / max(std, 1e-6)
    return vae.cfg.latent_scale
