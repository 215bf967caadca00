"""Toy temporal U-Net that predicts v from (z_t, x_tau, embed, t).

Spatial layers act per frame on (B*T, C, H, W). Temporal layers attend
across the frame axis at every spatial location. Each resolution level
has one temporal slot, filled by either a plain temporal block or the
multi-scale temporal attention block (``msta_enabled``).

New temporal branches are zero-initialized on their output side, so a
freshly built network behaves as a per-frame image model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import Conditioning
from .errors import ConfigError, ContractError

MSTA_FUSIONS = ("corrected", "printed")
SPATIAL_ROOTS = frozenset({"conv_in", "time_mlp", "cond_mlp", "down", "mid", "up", "norm_out", "conv_out"})


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    cond_channels: int = 3
    base_channels: int = 16
    depth: int = 2
    temporal_heads: int = 2
    msta_alpha: float = 0.5
    msta_enabled: bool = True
    msta_fusion: str = "corrected"
    embed_dim: int = 8
    timesteps: int = 1000

    def validate(self) -> "DenoiserConfig":
        if not 0.0 <= self.msta_alpha <= 1.0:
            raise ConfigError(f"msta_alpha must lie in [0, 1], got {self.msta_alpha}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.msta_fusion not in MSTA_FUSIONS:
            raise ConfigError(f"msta_fusion must be one of {MSTA_FUSIONS}")
        for lvl in range(self.depth):
            if (self.base_channels << lvl) % self.temporal_heads:
                raise ConfigError("channel count at every level must be divisible by temporal_heads")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d).validate()


def sinusoidal(x: torch.Tensor, dim: int, dtype=None) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half).to(x.device)
    args = x.double()[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(dtype or torch.get_default_dtype())


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AdaLN(nn.Module):
    """Channel LayerNorm whose scale/shift come from the timestep embedding."""

    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, elementwise_affine=False)
        self.mod = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x, emb):
        # x: (N, T, C) tokens; emb: (N, E) or None
        x = self.norm(x)
        if emb is None:
            return x
        scale, shift = self.mod(emb).chunk(2, dim=-1)
        return x * (1 + scale[:, None, :]) + shift[:, None, :]


class TemporalAttention(nn.Module):
    """Multi-head self-attention across frames, independently per pixel."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        N, T, C = x.shape
        x = x + sinusoidal(torch.arange(T, device=x.device), C, x.dtype)
        q, k, v = self.qkv(x).view(N, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(N, T, C)
        return self.proj(out)


def _to_tokens(h: torch.Tensor, frames: int):
    BT, C, H, W = h.shape
    B = BT // frames
    return h.view(B, frames, C, H, W).permute(0, 3, 4, 1, 2).reshape(B * H * W, frames, C), (B, C, H, W)


def _from_tokens(x: torch.Tensor, frames: int, dims):
    B, C, H, W = dims
    return x.view(B, H, W, frames, C).permute(0, 3, 4, 1, 2).reshape(B * frames, C, H, W)


def _token_emb(emb: Optional[torch.Tensor], frames: int, H: int, W: int):
    # emb is per (B*T) frame-batch; tokens are ordered (B, H, W)
    if emb is None:
        return None
    per_clip = emb[::frames]
    return per_clip.repeat_interleave(H * W, dim=0)


class TemporalBlock(nn.Module):
    """h + TA(AdaLN(h))."""

    def __init__(self, channels: int, emb_dim: int, heads: int):
        super().__init__()
        self.norm = AdaLN(channels, emb_dim)
        self.attn = TemporalAttention(channels, heads)

    def forward(self, h, emb, frames):
        if h.shape[0] % frames:
            raise ContractError("leading dim is not a multiple of the frame count")
        tok, dims = _to_tokens(h, frames)
        e = _token_emb(emb, frames, dims[2], dims[3])
        out = tok + self.attn(self.norm(tok, e))
        return _from_tokens(out, frames, dims)


class MSTABlock(nn.Module):
    """Temporal attention at native and half resolution, fused with weight alpha."""

    def __init__(self, channels: int, emb_dim: int, heads: int, alpha: float = 0.5, fusion: str = "corrected"):
        super().__init__()
        self.alpha = alpha
        self.fusion = fusion
        self.norm = AdaLN(channels, emb_dim)
        self.norm_down = AdaLN(channels, emb_dim)
        # one attention projection per level, shared by both scales
        self.attn = TemporalAttention(channels, heads)
        self.msta_down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.msta_up = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.msta_up.weight)
        nn.init.zeros_(self.msta_up.bias)

    def _branch(self, h, norm, emb, frames):
        tok, dims = _to_tokens(h, frames)
        e = _token_emb(emb, frames, dims[2], dims[3])
        return _from_tokens(tok + self.attn(norm(tok, e)), frames, dims)

    def _upsample(self, x, size):
        return F.interpolate(x, scale_factor=2, mode="nearest")[..., : size[0], : size[1]]

    def branches(self, h, emb, frames):
        """Return (h_ori, h_down) before fusion."""
        if frames < 1 or h.shape[0] % frames:
            raise ContractError("MSTA needs T >= 1 and a leading dim divisible by T")
        h_ori = self._branch(h, self.norm, emb, frames)
        h_down = self._branch(self.msta_down(h), self.norm_down, emb, frames)
        return h_ori, h_down

    def forward(self, h, emb, frames):
        h_ori, h_down = self.branches(h, emb, frames)
        up = self.msta_up(self._upsample(h_down, h.shape[-2:]))
        if self.fusion == "printed":
            return self._upsample(h_down, h.shape[-2:]) + self.alpha * up
        return h_ori + self.alpha * up


def msta_block(h: torch.Tensor, cfg: DenoiserConfig, block: Optional[nn.Module] = None, emb=None) -> torch.Tensor:
    """Apply a temporal slot to a (T, C, H, W) hidden state.

    Builds a fresh block from ``cfg`` when none is given; with
    ``msta_enabled=False`` only the native-resolution branch runs.
    """
    if h.ndim != 4:
        raise ContractError("expected a (T, C, H, W) hidden state")
    T, C = h.shape[:2]
    if T == 0:
        raise ContractError("MSTA needs at least one frame")
    if block is None:
        block = make_temporal_slot(C, 1, cfg)
    return block(h, emb, T)


def make_temporal_slot(channels: int, emb_dim: int, cfg: DenoiserConfig) -> nn.Module:
    if cfg.msta_enabled:
        return MSTABlock(channels, emb_dim, cfg.temporal_heads, cfg.msta_alpha, cfg.msta_fusion)
    return TemporalBlock(channels, emb_dim, cfg.temporal_heads)


class Level(nn.Module):
    def __init__(self, cin, cout, emb_dim, cfg, resample: Optional[str]):
        super().__init__()
        self.res = ResBlock(cin, cout, emb_dim)
        self.temporal = make_temporal_slot(cout, emb_dim, cfg)
        if resample == "down":
            self.resample = nn.Conv2d(cout, cout, 3, stride=2, padding=1)
        elif resample == "up":
            self.resample = nn.Conv2d(cout, cout, 3, padding=1)
        else:
            self.resample = None
        self.mode = resample

    def forward(self, h, emb, frames):
        h = self.temporal(self.res(h, emb), emb, frames)
        return h

    def apply_resample(self, h, size=None):
        if self.mode == "down":
            return self.resample(h)
        if self.mode == "up":
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if size is not None:
                h = h[..., : size[0], : size[1]]
            return self.resample(h)
        return h


class VideoDenoiser(nn.Module):
    def __init__(self, cfg: Optional[DenoiserConfig] = None):
        super().__init__()
        self.cfg = cfg = (cfg or DenoiserConfig()).validate()
        ch = [cfg.base_channels << i for i in range(cfg.depth)]
        emb_dim = 4 * cfg.base_channels
        self.emb_dim = emb_dim
        self.conv_in = nn.Conv2d(cfg.latent_channels + cfg.cond_channels, ch[0], 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_mlp = nn.Sequential(nn.Linear(cfg.base_channels + cfg.embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.down = nn.ModuleList()
        cin = ch[0]
        for i, c in enumerate(ch):
            self.down.append(Level(cin, c, emb_dim, cfg, "down" if i < cfg.depth - 1 else None))
            cin = c
        self.mid = Level(ch[-1], ch[-1], emb_dim, cfg, None)
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(Level(cin + ch[i], ch[i], emb_dim, cfg, "up" if i > 0 else None))
            cin = ch[i]
        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def _embedding(self, t, tau, embed, B, device, dtype):
        t = torch.as_tensor(t, device=device).reshape(-1).expand(B) if not isinstance(t, torch.Tensor) or t.numel() == 1 else t.to(device)
        tau = torch.as_tensor(tau, device=device).reshape(-1).expand(B) if not isinstance(tau, torch.Tensor) or tau.numel() == 1 else tau.to(device)
        scale = 1000.0 / self.cfg.timesteps
        e = self.time_mlp(sinusoidal(t.double() * scale, self.cfg.base_channels, dtype))
        if embed is None or embed.numel() == 0:
            embed = torch.zeros(B, self.cfg.embed_dim, device=device, dtype=dtype)
        elif embed.ndim == 1:
            embed = embed.expand(B, -1)
        if embed.shape[-1] != self.cfg.embed_dim:
            raise ContractError(f"conditioning embed must have dim {self.cfg.embed_dim}")
        c = self.cond_mlp(torch.cat([sinusoidal(tau.double() * scale, self.cfg.base_channels, dtype), embed.to(dtype)], dim=-1))
        return e + c

    def forward(self, z_t: torch.Tensor, cond: Conditioning, t) -> torch.Tensor:
        """Predict v for z_t of shape (T, C, h, w) or (B, T, C, h, w)."""
        unbatched = z_t.ndim == 4
        if unbatched:
            z_t = z_t.unsqueeze(0)
        x = cond.lr_latent.unsqueeze(0) if cond.lr_latent.ndim == 4 else cond.lr_latent
        if z_t.ndim != 5 or z_t.shape[2] != self.cfg.latent_channels:
            raise ContractError(f"z_t must be (B, T, {self.cfg.latent_channels}, h, w), got {tuple(z_t.shape)}")
        if x.shape[:2] != z_t.shape[:2] or x.shape[-2:] != z_t.shape[-2:] or x.shape[2] != self.cfg.cond_channels:
            raise ContractError(f"conditioning geometry {tuple(x.shape)} does not match latent {tuple(z_t.shape)}")
        B, T, _, H, W = z_t.shape
        emb = self._embedding(t, cond.tau, cond.embed, B, z_t.device, z_t.dtype)
        emb = emb.repeat_interleave(T, dim=0)

        h = self.conv_in(torch.cat([z_t, x.to(z_t.dtype)], dim=2).reshape(B * T, -1, H, W))
        skips, sizes = [], []
        for lvl in self.down:
            h = lvl(h, emb, T)
            skips.append(h)
            sizes.append(h.shape[-2:])
            h = lvl.apply_resample(h)
        h = self.mid(h, emb, T)
        for lvl in self.up:
            h = lvl(torch.cat([h, skips.pop()], dim=1), emb, T)
            sizes.pop()
            h = lvl.apply_resample(h, sizes[-1] if sizes else None)
        out = self.conv_out(F.silu(self.norm_out(h))).view(B, T, -1, H, W)
        return out[0] if unbatched else out


@dataclass
class ParamGroups:
    spatial: dict
    temporal: dict

    def names(self, group: str) -> set:
        return set(getattr(self, group))


def classify_param(name: str) -> str:
    parts = name.split(".")
    if "temporal" in parts:
        return "temporal"
    if parts[0] in SPATIAL_ROOTS:
        return "spatial"
    raise RuntimeError(f"cannot classify parameter {name!r} as spatial or temporal")


def param_groups(model: nn.Module) -> ParamGroups:
    """Partition every named parameter into the spatial or temporal group."""
    spatial, temporal = {}, {}
    for name, p in model.named_parameters():
        (temporal if classify_param(name) == "temporal" else spatial)[name] = p
    return ParamGroups(spatial, temporal)


def set_trainable(model: nn.Module, trainable: str) -> list:
    """Freeze according to ``trainable`` ('temporal_only' | 'spatial_only' | 'all'); return trainable params."""
    groups = param_groups(model)
    if trainable == "all":
        on = set(groups.spatial) | set(groups.temporal)
    elif trainable == "temporal_only":
        on = set(groups.temporal)
    elif trainable == "spatial_only":
        on = set(groups.spatial)
    else:
        raise ConfigError(f"unknown trainable scope {trainable!r}")
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in on)
        if name in on:
            params.append(p)
    return params
