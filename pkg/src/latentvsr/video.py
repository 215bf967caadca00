"""Pixel/latent containers and lossless clip I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .errors import ContractError


@dataclass
class VideoClip:
    frames: torch.Tensor  # (T, C, H, W)
    value_range: tuple = (0.0, 1.0)
    fps: float = 24.0

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ContractError(f"VideoClip frames must be (T, C, H, W), got {tuple(self.frames.shape)}")

    @property
    def shape(self):
        return tuple(self.frames.shape)


@dataclass
class LatentSequence:
    """Per-frame latents (T, C_z, h, w) and the diffusion timestep they sit at."""

    z: torch.Tensor
    t: Optional[int] = None


def save_clip(path, clip) -> None:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    np.save(Path(path), frames.detach().cpu().numpy().astype(np.float32), allow_pickle=False)


def load_clip(path) -> torch.Tensor:
    return torch.from_numpy(np.load(Path(path), allow_pickle=False))


def save_frames_png(directory, frames: torch.Tensor) -> list:
    """Dump (T, 3, H, W) frames in [0, 1] as 8-bit PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    arr = (frames.detach().cpu().clamp(0, 1).numpy() * 255.0 + 0.5).astype(np.uint8)
    for i, f in enumerate(arr):
        p = directory / f"frame_{i:04d}.png"
        Image.fromarray(np.transpose(f, (1, 2, 0))).save(p)
        out.append(p)
    return out


def load_frames_png(directory) -> torch.Tensor:
    """Read a sorted image sequence into a (T, 3, H, W) float tensor in [0, 1]."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in {".png", ".bmp", ".ppm"})
    if not paths:
        raise ContractError(f"no images found in {directory}")
    frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in paths]
    return torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2).copy())


def read_video(path) -> torch.Tensor:
    path = Path(path)
    if path.is_dir():
        return load_frames_png(path)
    return load_clip(path)
