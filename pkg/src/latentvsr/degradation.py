"""Low-resolution input synthesis at three severity tiers.

Every sampled parameter lands in a replayable recipe; ``apply_recipe(hr,
recipe)`` reproduces the LR clip bit for bit. Parameters are drawn once
per clip, so all frames of a clip share them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn

from .errors import ConfigError, ContractError

TIERS = ("bicubic_only", "simple", "complex")

# JPEG luminance quantization table (ITU-T T.81, Annex K)
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class DegradationConfig:
    tier: str = "simple"
    blur_sigma_range: tuple = (0.2, 2.0)
    noise_sigma_range: tuple = (0.01, 0.08)
    compression_quality_range: tuple = (0.2, 0.7)
    scale: int = 4
    seed: int = 0

    def validate(self) -> "DegradationConfig":
        if self.tier not in TIERS:
            raise ConfigError(f"unknown degradation tier {self.tier!r}; expected one of {TIERS}")
        if self.scale != 4:
            raise ConfigError("only x4 degradation is supported")
        for name in ("blur_sigma_range", "noise_sigma_range", "compression_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError("sigma ranges must be non-negative")
        lo, hi = self.compression_quality_range
        if lo <= 0 or hi > 1:
            raise ConfigError("compression quality must lie in (0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        d = dict(d)
        for k in ("blur_sigma_range", "noise_sigma_range", "compression_quality_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class DegradedPair:
    lr: torch.Tensor
    hr: torch.Tensor
    recipe: list
    clip_index: Optional[int] = None
    frame_indices: Optional[list] = None
    origin: Optional[tuple] = None


# -- primitive ops; all act on (T, C, H, W) float32 tensors

def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (coords / sigma) ** 2)
    k = (k / k.sum()).to(x.dtype)
    C = x.shape[1]
    pad_h = min(radius, x.shape[-2] - 1)
    pad_w = min(radius, x.shape[-1] - 1)
    if pad_h < radius or pad_w < radius:
        y = F.pad(x, (radius, radius, radius, radius), mode="replicate")
    else:
        y = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    y = F.conv2d(y, k.view(1, 1, 1, -1).repeat(C, 1, 1, 1), groups=C)
    return F.conv2d(y, k.view(1, 1, -1, 1).repeat(C, 1, 1, 1), groups=C)


def bicubic_resize(x: torch.Tensor, size) -> torch.Tensor:
    antialias = size[0] < x.shape[-2]
    return F.interpolate(x, size=tuple(size), mode="bicubic", align_corners=False, antialias=antialias)


def downsample(x: torch.Tensor, scale: int) -> torch.Tensor:
    H, W = x.shape[-2:]
    return bicubic_resize(x, (H // scale, W // scale))


def add_noise(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return x + sigma * torch.randn(x.shape, generator=g, dtype=x.dtype)


def jpeg_quant_table(quality: float) -> np.ndarray:
    q = min(max(quality * 100.0, 1.0), 100.0)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.maximum(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0)


def block_dct_compress(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Quantize 8x8 block-DCT coefficients per channel (a JPEG stand-in)."""
    arr = x.detach().cpu().numpy().astype(np.float64) * 255.0 - 128.0
    T, C, H, W = arr.shape
    ph, pw = (-H) % 8, (-W) % 8
    arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    Hp, Wp = arr.shape[-2:]
    blocks = arr.reshape(T, C, Hp // 8, 8, Wp // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    table = jpeg_quant_table(quality)
    coef = np.round(coef / table) * table
    rec = idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 2, 4, 3, 5).reshape(T, C, Hp, Wp)[..., :H, :W]
    return torch.from_numpy(((rec + 128.0) / 255.0).astype(np.float32))


def apply_op(x: torch.Tensor, op: dict) -> torch.Tensor:
    kind = op["op"]
    if kind == "blur":
        return gaussian_blur(x, op["sigma"])
    if kind == "downsample":
        return downsample(x, op["scale"])
    if kind == "noise":
        return add_noise(x, op["sigma"], op["seed"])
    if kind == "compress":
        return block_dct_compress(x, op["quality"])
    raise ConfigError(f"unknown degradation op {kind!r}")


def apply_recipe(hr: torch.Tensor, recipe: list) -> torch.Tensor:
    x = hr.to(torch.float32)
    for op in recipe:
        x = apply_op(x, op)
    return x.clamp(0.0, 1.0)


def sample_recipe(cfg: DegradationConfig, rng: np.random.Generator) -> list:
    cfg.validate()
    if cfg.tier == "bicubic_only":
        return [{"op": "downsample", "scale": cfg.scale}]
    blur = {"op": "blur", "sigma": float(rng.uniform(*cfg.blur_sigma_range))}
    down = {"op": "downsample", "scale": cfg.scale}
    if cfg.tier == "simple":
        return [blur, down]
    ops = [
        blur,
        down,
        {"op": "noise", "sigma": float(rng.uniform(*cfg.noise_sigma_range)), "seed": int(rng.integers(0, 2**31 - 1))},
        {"op": "compress", "quality": float(rng.uniform(*cfg.compression_quality_range))},
    ]
    order = rng.permutation(len(ops))
    return [ops[i] for i in order]


def degrade(hr: torch.Tensor, cfg: DegradationConfig, rng: Optional[np.random.Generator] = None) -> DegradedPair:
    """Degrade a (T, C, H, W) HR clip in [0, 1]; returns the pair and its recipe."""
    cfg.validate()
    if hr.ndim != 4:
        raise ContractError("expected a (T, C, H, W) clip")
    H, W = hr.shape[-2:]
    if H % cfg.scale or W % cfg.scale:
        raise ContractError(f"clip size {H}x{W} not divisible by scale {cfg.scale}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    recipe = sample_recipe(cfg, rng)
    return DegradedPair(apply_recipe(hr, recipe), hr, recipe)


def upscale_lr(lr: torch.Tensor, scale: int = 4) -> torch.Tensor:
    H, W = lr.shape[-2:]
    return bicubic_resize(lr, (H * scale, W * scale)).clamp(0.0, 1.0)
