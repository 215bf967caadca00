"""Procedural training videos with exact, known motion.

Each clip renders an analytic texture (oriented gratings, a soft
checkerboard and soft-edged discs) under a per-frame similarity
transform, so the dense motion between any two frames is known in
closed form. Clips are then degraded at the dataset's tier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .degradation import DegradationConfig, DegradedPair, apply_recipe, degrade
from .errors import ConfigError, ContractError

MOTIONS = ("translate", "rotate", "zoom", "mixed", "static")
QUALITIES = ("base", "high")


# -- textures

def sample_texture(rng: np.random.Generator, quality: str = "base") -> dict:
    rich = quality == "high"
    n_grat = int(rng.integers(6, 10) if rich else rng.integers(3, 6))
    f_hi = 0.3 if rich else 0.22
    freqs = rng.uniform(0.02, f_hi, n_grat)
    theta = rng.uniform(0, math.pi, n_grat)
    return {
        "base": rng.uniform(0.25, 0.75, 3).tolist(),
        "grat_k": np.stack([freqs * np.cos(theta), freqs * np.sin(theta)], 1).tolist(),
        "grat_phase": rng.uniform(0, 2 * math.pi, n_grat).tolist(),
        "grat_color": (rng.uniform(-1, 1, (n_grat, 3)) * (0.12 if rich else 0.15)).tolist(),
        "check_period": float(rng.uniform(6, 14) if rich else rng.uniform(8, 20)),
        "check_angle": float(rng.uniform(0, math.pi)),
        "check_color": (rng.uniform(-1, 1, 3) * 0.15).tolist(),
        "discs": [
            {
                "c": rng.uniform(-40, 104, 2).tolist(),
                "r": float(rng.uniform(3, 12)),
                "color": rng.uniform(-0.3, 0.3, 3).tolist(),
            }
            for _ in range(int(rng.integers(4, 9) if rich else rng.integers(2, 5)))
        ],
    }


def eval_texture(tex: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate the texture at float coordinates; returns (3, *x.shape) in [0, 1]."""
    out = np.empty((3,) + x.shape)
    out[:] = np.asarray(tex["base"]).reshape(3, *([1] * x.ndim))
    for k, ph, col in zip(tex["grat_k"], tex["grat_phase"], tex["grat_color"]):
        s = np.sin(2 * math.pi * (k[0] * x + k[1] * y) + ph)
        out += np.asarray(col).reshape(3, *([1] * x.ndim)) * s
    ca, sa = math.cos(tex["check_angle"]), math.sin(tex["check_angle"])
    xr, yr = ca * x + sa * y, -sa * x + ca * y
    w = 2 * math.pi / tex["check_period"]
    chk = np.tanh(3.0 * np.sin(w * xr) * np.sin(w * yr))
    out += np.asarray(tex["check_color"]).reshape(3, *([1] * x.ndim)) * chk
    for d in tex["discs"]:
        dist = np.hypot(x - d["c"][0], y - d["c"][1])
        m = 1.0 / (1.0 + np.exp(-(d["r"] - dist) / 0.75))
        out += np.asarray(d["color"]).reshape(3, *([1] * x.ndim)) * m
    return np.clip(out, 0.0, 1.0)


# -- motion

def sample_motion(kind: str, rng: np.random.Generator) -> dict:
    if kind not in MOTIONS:
        raise ConfigError(f"unknown motion kind {kind!r}; expected one of {MOTIONS}")
    m = {"kind": kind, "v": [0.0, 0.0], "omega": 0.0, "zoom": 1.0}
    if kind in ("translate", "mixed"):
        m["v"] = rng.uniform(-2.0, 2.0, 2).tolist() if kind == "translate" else rng.uniform(-1.2, 1.2, 2).tolist()
    if kind in ("rotate", "mixed"):
        m["omega"] = float(np.deg2rad(rng.uniform(-2.0, 2.0) if kind == "rotate" else rng.uniform(-1.0, 1.0)))
    if kind in ("zoom", "mixed"):
        m["zoom"] = float(rng.uniform(0.98, 1.02) if kind == "zoom" else rng.uniform(0.99, 1.01))
    return m


def _forward(m: dict, t, u, c):
    """Map texture coordinates u (2, ...) to frame-t pixel coordinates."""
    s = m["zoom"] ** t
    a = m["omega"] * t
    dx, dy = u[0] - c[0], u[1] - c[1]
    x = c[0] + s * (math.cos(a) * dx - math.sin(a) * dy) + t * m["v"][0]
    y = c[1] + s * (math.sin(a) * dx + math.cos(a) * dy) + t * m["v"][1]
    return np.stack([x, y])


def _inverse(m: dict, t, p, c):
    s = m["zoom"] ** (-t)
    a = -m["omega"] * t
    dx, dy = p[0] - c[0] - t * m["v"][0], p[1] - c[1] - t * m["v"][1]
    x = c[0] + s * (math.cos(a) * dx - math.sin(a) * dy)
    y = c[1] + s * (math.sin(a) * dx + math.cos(a) * dy)
    return np.stack([x, y])


def _grid(H, W):
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([xs, ys])


def render_clip(tex: dict, motion: dict, frames: int, size: int, t0: int = 0) -> torch.Tensor:
    p = _grid(size, size)
    c = ((size - 1) / 2.0, (size - 1) / 2.0)
    out = np.empty((frames, 3, size, size), dtype=np.float32)
    for i in range(frames):
        t = t0 + i
        if motion["omega"] == 0.0 and motion["zoom"] == 1.0:
            u = np.stack([p[0] - t * motion["v"][0], p[1] - t * motion["v"][1]])
        else:
            u = _inverse(motion, t, p, c)
        out[i] = eval_texture(tex, u[0], u[1])
    return torch.from_numpy(out)


def motion_field(motion: dict, frames: int, size: int) -> torch.Tensor:
    """(T-1, 2, H, W) field: content at p - d[t](p) in frame t sits at p in frame t+1."""
    p = _grid(size, size)
    c = ((size - 1) / 2.0, (size - 1) / 2.0)
    out = np.empty((max(frames - 1, 0), 2, size, size), dtype=np.float64)
    for t in range(frames - 1):
        if motion["omega"] == 0.0 and motion["zoom"] == 1.0:
            out[t, 0] = motion["v"][0]
            out[t, 1] = motion["v"][1]
        else:
            src = _forward(motion, t, _inverse(motion, t + 1, p, c), c)
            out[t] = p - src
    return torch.from_numpy(out)


# -- datasets

@dataclass
class ClipDataset:
    hr: list
    lr: list
    recipes: list
    motions: list
    textures: list
    tier: str
    quality: str = "base"
    motion_kind: str = "mixed"
    cfg: Optional[DegradationConfig] = None
    seed: int = 0

    def __len__(self):
        return len(self.hr)

    @property
    def frames(self) -> int:
        return int(self.hr[0].shape[0])

    @property
    def size(self) -> int:
        return int(self.hr[0].shape[-1])

    def pair(self, i: int) -> DegradedPair:
        return DegradedPair(self.lr[i], self.hr[i], self.recipes[i], clip_index=i)

    def motion_field(self, i: int) -> torch.Tensor:
        return motion_field(self.motions[i], self.frames, self.size)

    def sample_hr(self, frames: int, g: torch.Generator, patch: int = 64) -> torch.Tensor:
        """Random consecutive-frame HR crop, for autoencoder training."""
        i = int(torch.randint(len(self), (1,), generator=g))
        T = self.frames
        if frames > T:
            raise ContractError(f"clips have {T} frames, {frames} requested")
        s = int(torch.randint(T - frames + 1, (1,), generator=g))
        patch = min(patch, self.size)
        r = int(torch.randint((self.size - patch) // 4 + 1, (1,), generator=g)) * 4
        c = int(torch.randint((self.size - patch) // 4 + 1, (1,), generator=g)) * 4
        return self.hr[i][s : s + frames, :, r : r + patch, c : c + patch]

    def entries(self) -> list:
        return [
            {
                "clip_id": f"clip_{i:04d}",
                "tier": self.tier,
                "quality": self.quality,
                "motion_kind": self.motion_kind,
                "motion": self.motions[i],
                "recipe": self.recipes[i],
                "frames": self.frames,
                "size": self.size,
                "hr": f"clip_{i:04d}_hr.npy",
                "lr": f"clip_{i:04d}_lr.npy",
                "motion_field": f"clip_{i:04d}_motion.npy",
                "seed": self.seed,
                "degradation": self.cfg.to_dict() if self.cfg else None,
            }
            for i in range(len(self))
        ]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, e in enumerate(self.entries()):
            np.save(directory / e["hr"], self.hr[i].numpy(), allow_pickle=False)
            np.save(directory / e["lr"], self.lr[i].numpy(), allow_pickle=False)
            np.save(directory / e["motion_field"], self.motion_field(i).numpy().astype(np.float32), allow_pickle=False)
            lines.append(json.dumps(e, sort_keys=True))
        (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "ClipDataset":
        directory = Path(directory)
        manifest = directory / "manifest.jsonl"
        if not manifest.exists():
            raise ConfigError(f"no dataset manifest at {manifest}; run `latentvsr gen-data` first")
        entries = [json.loads(l) for l in manifest.read_text().splitlines() if l.strip()]
        if not entries:
            raise ConfigError(f"empty dataset manifest {manifest}")
        hr = [torch.from_numpy(np.load(directory / e["hr"])) for e in entries]
        lr = [torch.from_numpy(np.load(directory / e["lr"])) for e in entries]
        e0 = entries[0]
        cfg = DegradationConfig.from_dict(e0["degradation"]) if e0.get("degradation") else None
        return cls(hr, lr, [e["recipe"] for e in entries], [e["motion"] for e in entries], [None] * len(entries),
                   e0["tier"], e0["quality"], e0["motion_kind"], cfg, e0.get("seed", 0))


def make_synthetic_dataset(n_clips: int, motion: str, cfg: DegradationConfig, seed: int, *,
                           frames: int = 48, size: Optional[int] = None, quality: str = "base",
                           motion_params: Optional[dict] = None) -> ClipDataset:
    """Generate ``n_clips`` textured clips with known motion, degraded per ``cfg``.

    ``quality='high'`` renders at twice the base resolution with richer
    texture spectra. Each clip derives its own seed from (seed, index).
    """
    if n_clips < 1:
        raise ConfigError("n_clips must be >= 1")
    if quality not in QUALITIES:
        raise ConfigError(f"unknown quality {quality!r}")
    if motion not in MOTIONS:
        raise ConfigError(f"unknown motion kind {motion!r}; expected one of {MOTIONS}")
    cfg.validate()
    size = size or (128 if quality == "high" else 64)
    hr, lr, recipes, motions, textures = [], [], [], [], []
    for i in range(n_clips):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        tex = sample_texture(rng, quality)
        kind = motion
        if motion_params is not None:
            mot = {"kind": motion, "v": [0.0, 0.0], "omega": 0.0, "zoom": 1.0, **motion_params}
        else:
            mot = sample_motion(kind, rng)
        clip = render_clip(tex, mot, frames, size)
        pair = degrade(clip, cfg, rng)
        hr.append(clip)
        lr.append(pair.lr)
        recipes.append(pair.recipe)
        motions.append(mot)
        textures.append(tex)
    return ClipDataset(hr, lr, recipes, motions, textures, cfg.tier, quality, motion, cfg, seed)


def replay(ds: ClipDataset, i: int) -> torch.Tensor:
    return apply_recipe(ds.hr[i], ds.recipes[i])
