"""Fidelity and temporal-consistency metrics on known-motion clips."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import kernels
from .errors import ContractError

PSNR_CAP = 100.0
WARP_SCALE = 1e3  # reported in units of 1e-3


@dataclass
class MetricsReport:
    psnr: Optional[float]
    warp_error: Optional[float]
    flicker: float
    per_frame: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def psnr_per_frame(a, b, max_val: float = 1.0, cap: float = PSNR_CAP) -> np.ndarray:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(max_val**2 / mse)
    return np.minimum(vals, cap)


def psnr(a, b, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Per-frame PSNR in dB averaged over frames; identical frames score ``cap``."""
    return float(np.mean(psnr_per_frame(a, b, max_val, cap)))


def warp_error_per_frame(clip, motion, backend=None) -> np.ndarray:
    x, m = _np(clip), _np(motion)
    if x.ndim != 4:
        raise ContractError("warp_error expects a (T, C, H, W) clip")
    T, _, H, W = x.shape
    if m.shape != (T - 1, 2, H, W):
        raise ContractError(f"motion field shape {m.shape} does not match clip {(T - 1, 2, H, W)}")
    out = np.zeros(max(T - 1, 0))
    for t in range(T - 1):
        total, count = kernels.warp_abs_diff(x[t], x[t + 1], m[t], backend=backend)
        out[t] = total / count if count else 0.0
    return out


def warp_error(clip, motion, backend=None, scale: float = WARP_SCALE) -> float:
    """Mean masked |frame[t+1] - warp(frame[t])|, reported in units of 1e-3."""
    per = warp_error_per_frame(clip, motion, backend)
    return float(per.mean() * scale) if per.size else 0.0


def flicker(clip) -> float:
    """Mean variance of frame-to-frame intensity change along every scanline."""
    x = _np(clip)
    if x.shape[0] < 2:
        return 0.0
    lum = x.mean(axis=1)  # (T, H, W)
    d = np.diff(lum, axis=0)  # (T-1, H, W)
    return float(d.var(axis=0).mean())


def temporal_profile(clip, row: int, path=None) -> np.ndarray:
    """Stack scanline ``row`` of every frame into a (T, W, C) image."""
    x = _np(clip)
    if not 0 <= row < x.shape[2]:
        raise ContractError(f"row {row} outside [0, {x.shape[2]})")
    img = np.transpose(x[:, :, row, :], (0, 2, 1))
    if path is not None:
        u8 = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(u8.squeeze(-1) if u8.shape[-1] == 1 else u8).save(Path(path))
    return img


def evaluate_clip(out, hr=None, motion=None) -> MetricsReport:
    per = {}
    p = w = None
    if hr is not None:
        pf = psnr_per_frame(out, hr)
        p = float(pf.mean())
        per["psnr"] = pf.tolist()
    if motion is not None:
        wf = warp_error_per_frame(out, motion) * WARP_SCALE
        w = float(wf.mean()) if wf.size else 0.0
        per["warp_error"] = wf.tolist()
    return MetricsReport(p, w, flicker(out), per)
