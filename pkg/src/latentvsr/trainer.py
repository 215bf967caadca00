"""Staged fine-tuning of the video denoiser.

A curriculum is an ordered list of stages; each stage fixes the
degradation tier of its data, the data quality, which parameter group is
trainable, and a step budget. Three strategies are provided:

    pls3       simple/temporal_only/base -> complex/temporal_only/base -> complex/all/high
    two_stage  simple/temporal_only/base -> complex/all/base
    direct     complex/temporal_only/base

Training runs on VAE latents of 8-frame clips sampled at random temporal
strides and cropped at positions aligned to the x4 downscale.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, optimizer_tensors, prefixed, restore_optimizer, save_checkpoint, strip_prefix
from .degradation import TIERS, DegradedPair
from .denoiser import DenoiserConfig, VideoDenoiser, set_trainable
from .diffusion import Conditioning, NoiseSchedule, _coef, diffusion_loss, forward_noise, sample, tau_range
from .errors import ConfigError, ContractError, NumericError
from .metrics import psnr_per_frame
from .synthetic import ClipDataset
from .vae import VaeConfig, VideoVAE

STRATEGIES = ("pls3", "two_stage", "direct")
TRAINABLE = ("temporal_only", "spatial_only", "all")

# (tier, trainable, data_quality) per stage
_LAYOUTS = {
    "pls3": [("simple", "temporal_only", "base"), ("complex", "temporal_only", "base"), ("complex", "all", "high")],
    "two_stage": [("simple", "temporal_only", "base"), ("complex", "all", "base")],
    "direct": [("complex", "temporal_only", "base")],
}


@dataclass
class StageConfig:
    name: str
    tier: str
    trainable: str
    data_quality: str = "base"
    iterations: int = 1000
    lr: float = 1e-4
    batch: int = 4

    def validate(self) -> "StageConfig":
        if self.tier not in TIERS:
            raise ConfigError(f"stage {self.name}: unknown tier {self.tier!r}")
        if self.trainable not in TRAINABLE:
            raise ConfigError(f"stage {self.name}: unknown trainable scope {self.trainable!r}")
        if self.data_quality not in ("base", "high"):
            raise ConfigError(f"stage {self.name}: unknown data quality {self.data_quality!r}")
        if self.iterations < 1:
            raise ConfigError(f"stage {self.name}: iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"stage {self.name}: lr must be > 0")
        if self.batch < 1:
            raise ConfigError(f"stage {self.name}: batch must be >= 1")
        return self

    @property
    def signature(self) -> tuple:
        return (self.tier, self.trainable, self.data_quality)


@dataclass
class Curriculum:
    strategy: str
    stages: list

    def validate(self) -> "Curriculum":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for s in self.stages:
            s.validate()
        got = [s.signature for s in self.stages]
        want = [tuple(x) for x in _LAYOUTS[self.strategy]]
        if got != want:
            raise ConfigError(f"strategy {self.strategy} needs stages {want}, got {got}")
        return self

    @property
    def total_steps(self) -> int:
        return sum(s.iterations for s in self.stages)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "Curriculum":
        return cls(d["strategy"], [StageConfig(**s) for s in d["stages"]]).validate()


def make_curriculum(strategy: str, total_steps: int = 3000, lr: float = 1e-4, batch: int = 4) -> Curriculum:
    """Equal-budget curriculum: ``total_steps`` split evenly, remainder to the last stage."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    layout = _LAYOUTS[strategy]
    if total_steps < len(layout):
        raise ConfigError(f"{strategy} needs at least {len(layout)} steps")
    per = total_steps // len(layout)
    stages = []
    for k, (tier, trainable, quality) in enumerate(layout):
        n = per + (total_steps - per * len(layout) if k == len(layout) - 1 else 0)
        stages.append(StageConfig(f"stage{k + 1}", tier, trainable, quality, n, lr, batch))
    return Curriculum(strategy, stages).validate()


@dataclass
class TrainState:
    seed: int = 0
    stage_index: int = 0
    stage_step: int = 0
    global_step: int = 0
    history: list = field(default_factory=list)  # [{"stage", "step", "loss"}]
    evals: list = field(default_factory=list)  # [{"stage", "step", ...metrics}]
    rng_state: Optional[torch.Tensor] = None
    optimizer: Optional[tuple] = None  # (tensors, info) when paused mid-stage

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "stage_index": self.stage_index,
            "stage_step": self.stage_step,
            "global_step": self.global_step,
            "history": self.history,
            "evals": self.evals,
            "optimizer": self.optimizer[1] if self.optimizer else None,
        }

    def tensors(self) -> dict:
        out = {}
        if self.rng_state is not None:
            out["rng.torch"] = self.rng_state
        if self.optimizer:
            out.update(self.optimizer[0])
        return out

    @classmethod
    def from_parts(cls, tensors: dict, meta: dict) -> "TrainState":
        opt = None
        if meta.get("optimizer") is not None:
            opt = ({k: v for k, v in tensors.items() if k.startswith("optim.")}, meta["optimizer"])
        return cls(meta["seed"], meta["stage_index"], meta["stage_step"], meta["global_step"],
                   meta["history"], meta.get("evals", []), tensors.get("rng.torch"), opt)


# -- data


class LatentCache:
    """Full-frame VAE latents per (dataset, clip, frame indices), bounded FIFO."""

    def __init__(self, vae: VideoVAE, max_entries: int = 8000):
        self.vae = vae
        self.max_entries = max_entries
        self._store: OrderedDict = OrderedDict()  # key -> (shape, row)
        # one lazily paged slab per latent shape; thousands of small
        # long-lived tensors fragment the heap far beyond their size
        self._slabs: dict = {}
        self._free: dict = {}
        self.hits = self.misses = 0

    def _row(self, shape) -> int:
        if shape not in self._slabs:
            self._slabs[shape] = torch.empty((self.max_entries,) + shape)
            self._free[shape] = list(range(self.max_entries - 1, -1, -1))
        return self._free[shape].pop()

    @torch.no_grad()
    def get(self, ds: ClipDataset, i: int, frame_indices) -> torch.Tensor:
        key = (ds.tier, ds.quality, ds.motion_kind, ds.seed, len(ds), ds.frames, ds.size, i, tuple(frame_indices))
        hit = self._store.get(key)
        if hit is not None:
            self.hits += 1
            return self._slabs[hit[0]][hit[1]].clone()
        self.misses += 1
        z = self.vae.encode(ds.hr[i][list(frame_indices)])
        if self.max_entries > 0:
            if len(self._store) >= self.max_entries:
                shape, row = self._store.popitem(last=False)[1]
                self._free[shape].append(row)
            shape = tuple(z.shape)
            row = self._row(shape)
            self._slabs[shape][row] = z
            self._store[key] = (shape, row)
        return z


def _randint(lo: int, hi: int, g: torch.Generator) -> int:
    """Uniform integer in [lo, hi]."""
    return lo + int(torch.randint(hi - lo + 1, (1,), generator=g))


def sample_training_clip(ds: ClipDataset, stride_range=(1, 6), patch: int = 64, rng: Optional[torch.Generator] = None,
                         frames: int = 8, max_retries: int = 16, scale: int = 4) -> DegradedPair:
    """Draw ``frames`` frames at a random temporal stride with co-located HR/LR crops."""
    g = rng or torch.Generator().manual_seed(0)
    lo, hi = stride_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid stride range {stride_range}")
    size = ds.size
    if patch > size or patch % scale:
        raise ContractError(f"patch {patch} must be a multiple of {scale} no larger than {size}")
    for _ in range(max_retries):
        i = int(torch.randint(len(ds), (1,), generator=g))
        stride = _randint(lo, hi, g)
        span = (frames - 1) * stride + 1
        T = int(ds.hr[i].shape[0])
        if span > T:
            continue
        start = _randint(0, T - span, g)
        idx = list(range(start, start + span, stride))
        r = _randint(0, (size - patch) // scale, g) * scale
        c = _randint(0, (size - patch) // scale, g) * scale
        hr = ds.hr[i][idx, :, r : r + patch, c : c + patch]
        p = patch // scale
        lr = ds.lr[i][idx, :, r // scale : r // scale + p, c // scale : c // scale + p]
        return DegradedPair(lr, hr, ds.recipes[i], clip_index=i, frame_indices=idx, origin=(r, c))
    raise ContractError(f"no clip long enough for {frames} frames at strides {stride_range} after {max_retries} tries")


@dataclass
class TrainContext:
    vae: VideoVAE
    sched: NoiseSchedule
    cache: LatentCache
    patch: int = 64
    frames: int = 8
    stride_range: tuple = (1, 6)

    @classmethod
    def build(cls, vae: VideoVAE, sched: NoiseSchedule, **kw) -> "TrainContext":
        return cls(vae, sched, LatentCache(vae), **kw)


def training_batch(ds: ClipDataset, ctx: TrainContext, batch: int, g: torch.Generator):
    """Latents (B, T, C, h, w) and aligned LR crops (B, T, 3, h, w)."""
    zs, lrs = [], []
    p = ctx.patch // 4
    for _ in range(batch):
        pair = sample_training_clip(ds, ctx.stride_range, ctx.patch, g, ctx.frames)
        full = ctx.cache.get(ds, pair.clip_index, pair.frame_indices)
        r, c = pair.origin[0] // 4, pair.origin[1] // 4
        zs.append(full[:, :, r : r + p, c : c + p])
        lrs.append(pair.lr)
    return torch.stack(zs), torch.stack(lrs)


def batch_loss(model, z: torch.Tensor, lr: torch.Tensor, sched: NoiseSchedule, g: torch.Generator) -> torch.Tensor:
    B = z.shape[0]
    t = torch.randint(sched.timesteps, (B,), generator=g)
    eps = torch.randn(z.shape, generator=g)
    zt = forward_noise(z, t, eps, sched).z
    lo, hi = tau_range(sched)
    tau = torch.randint(lo, hi + 1, (B,), generator=g)
    eps_c = torch.randn(lr.shape, generator=g)
    x_tau = _coef(sched.alpha, tau, lr) * lr + _coef(sched.sigma, tau, lr) * eps_c
    v = model(zt, Conditioning(x_tau, tau), t)
    return diffusion_loss(v, z, eps, t, sched)


# -- evaluation


@torch.no_grad()
def evaluate(model, ctx: TrainContext, val: ClipDataset, *, steps: int = 20, seed: int = 0, frames: int = 8,
             max_clips: Optional[int] = None) -> dict:
    """Eval PSNR of sampled+decoded first windows, plus a fixed-noise diffusion loss."""
    model.eval()
    n = len(val) if max_clips is None else min(max_clips, len(val))
    idx = list(range(frames))
    hr = torch.stack([val.hr[i][idx] for i in range(n)])
    lr = torch.stack([val.lr[i][idx] for i in range(n)])
    z = torch.stack([ctx.cache.get(val, i, idx) for i in range(n)])
    sched = ctx.sched
    g = torch.Generator().manual_seed(seed)
    eval_loss = float(batch_loss(model, z, lr, sched, g))
    tau = int(0.05 * sched.timesteps)
    x_tau = sched.a(tau) * lr + sched.s(tau) * torch.randn(lr.shape, generator=g)
    init = torch.randn(z.shape, generator=g)
    out = ctx.vae.decode(sample(model, Conditioning(x_tau, tau), init, sched, steps))
    per_clip = [float(psnr_per_frame(out[i], hr[i]).mean()) for i in range(n)]
    model.train()
    return {"psnr": float(np.mean(per_clip)), "eval_loss": eval_loss, "psnr_per_clip": per_clip}


# -- training


def _stage_seed(seed: int, stage_index: int) -> int:
    return int(np.random.SeedSequence([seed, stage_index, 101]).generate_state(1)[0])


def run_stage(model: VideoDenoiser, stage: StageConfig, ds: ClipDataset, state: TrainState, ctx: TrainContext, *,
              stop_after: Optional[int] = None, eval_fn: Optional[Callable] = None, eval_every: int = 0,
              snapshot_path=None, log: Optional[Callable] = None) -> TrainState:
    """Train ``stage`` from ``state.stage_step`` to its budget (or ``stop_after`` steps in).

    Frozen parameters are never handed to the optimizer, so they stay
    bitwise unchanged. A non-finite loss aborts with a snapshot.
    """
    stage.validate()
    if ds.tier != stage.tier:
        raise ConfigError(f"stage {stage.name} expects tier {stage.tier!r} data, dataset is {ds.tier!r}")
    if ds.quality != stage.data_quality:
        raise ConfigError(f"stage {stage.name} expects {stage.data_quality!r} data, dataset is {ds.quality!r}")
    params = set_trainable(model, stage.trainable)
    opt = torch.optim.AdamW(params, lr=stage.lr)
    if state.optimizer is not None:
        restore_optimizer(opt, *state.optimizer)
    g = torch.Generator()
    if state.rng_state is not None:
        g.set_state(state.rng_state)
    else:
        g.manual_seed(_stage_seed(state.seed, state.stage_index))
    model.train()
    end = stage.iterations if stop_after is None else min(stage.iterations, stop_after)
    while state.stage_step < end:
        z, lr = training_batch(ds, ctx, stage.batch, g)
        try:
            loss = batch_loss(model, z, lr, ctx.sched, g)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss {float(loss)}")
        except NumericError as e:
            if snapshot_path is not None:
                save_checkpoint(snapshot_path, prefixed(model.state_dict(), "model."),
                                {"kind": "nan_snapshot", "stage": stage.name, "global_step": state.global_step})
            raise NumericError(f"stage {stage.name} step {state.stage_step}: {e}; snapshot at {snapshot_path}") from e
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.stage_step += 1
        state.global_step += 1
        state.history.append({"stage": stage.name, "step": state.global_step, "loss": float(loss.detach())})
        if log is not None:
            log(state)
        if eval_fn is not None and eval_every and state.stage_step % eval_every == 0:
            state.evals.append({"stage": stage.name, "step": state.global_step, **eval_fn(model)})
    if state.stage_step >= stage.iterations:
        state.stage_index += 1
        state.stage_step = 0
        state.rng_state = None
        state.optimizer = None
    else:
        state.rng_state = g.get_state()
        state.optimizer = optimizer_tensors(opt)
    return state


def pretrain_spatial_prior(model: VideoDenoiser, ds: ClipDataset, steps: int, ctx: TrainContext, seed: int = 0,
                           lr: float = 1e-3, batch: int = 4) -> TrainState:
    """Fit the spatial layers on mildly degraded data, standing in for a pretrained image model."""
    stage = StageConfig("prior", ds.tier, "spatial_only", ds.quality, steps, lr, batch)
    return run_stage(model, stage, ds, TrainState(seed=seed + 7_000_000), ctx)


def required_datasets(cur: Curriculum) -> list:
    return sorted({(s.tier, s.data_quality) for s in cur.stages})


def model_tensors(model: VideoDenoiser, vae: Optional[VideoVAE]) -> dict:
    out = prefixed(model.state_dict(), "model.")
    if vae is not None:
        out.update(prefixed(vae.state_dict(), "vae."))
    return out


def checkpoint_meta(model: VideoDenoiser, ctx: TrainContext, extra: dict) -> dict:
    return {
        "kind": "denoiser",
        "denoiser_config": model.cfg.to_dict(),
        "vae_config": ctx.vae.cfg.to_dict(),
        "schedule": {"kind": ctx.sched.schedule_kind, "timesteps": ctx.sched.timesteps},
        **extra,
    }


def save_training_checkpoint(path, model, ctx: TrainContext, state: TrainState, cur: Curriculum, stage: Optional[StageConfig]):
    extra = {"curriculum": cur.to_dict(), "train_state": state.meta()}
    if stage is not None:
        extra["stage"] = {"name": stage.name, "tier": stage.tier, "trainable": stage.trainable, "step": state.global_step}
    return save_checkpoint(path, {**model_tensors(model, ctx.vae), **state.tensors()}, checkpoint_meta(model, ctx, extra))


def load_model_checkpoint(path):
    """Rebuild (model, vae, sched, meta, tensors) from a self-describing checkpoint."""
    from .diffusion import build_schedule

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ConfigError(f"{path} is a {meta.get('kind')!r} checkpoint, not a denoiser checkpoint")
    model = VideoDenoiser(DenoiserConfig.from_dict(meta["denoiser_config"]))
    model.load_state_dict(strip_prefix(tensors, "model."))
    vae = VideoVAE(VaeConfig.from_dict(meta["vae_config"]))
    vae_sd = strip_prefix(tensors, "vae.")
    if vae_sd:
        vae.load_state_dict(vae_sd)
    sched = build_schedule(meta["schedule"]["kind"], meta["schedule"]["timesteps"])
    return model.eval(), vae.eval(), sched, meta, tensors


def run_curriculum(model: VideoDenoiser, cur: Curriculum, datasets: dict, seed: int, ctx: TrainContext, *,
                   out_dir=None, val: Optional[ClipDataset] = None, eval_every: int = 0, eval_steps: int = 20,
                   resume: bool = False, checkpoint_every: int = 0, log: Optional[Callable] = None):
    """Run every stage in order, checkpointing after each; return (final checkpoint, report)."""
    cur.validate()
    missing = [k for k in required_datasets(cur) if k not in datasets]
    if missing:
        raise ConfigError(
            f"missing datasets for (tier, quality) {missing}; generate them with `latentvsr gen-data --tier <tier> --quality <quality>`"
        )
    out = Path(out_dir) if out_dir is not None else None
    state = TrainState(seed=seed)
    last = out / "last.safetensors" if out is not None else None
    if resume:
        if last is None or not last.exists():
            raise ConfigError(f"nothing to resume: {last} not found")
        tensors, meta = load_checkpoint(last)
        model.load_state_dict(strip_prefix(tensors, "model."))
        state = TrainState.from_parts(tensors, meta["train_state"])
    eval_fn = (lambda m: evaluate(m, ctx, val, steps=eval_steps)) if val is not None else None
    ckpts = []
    if out is not None:
        ckpts = [str(out / f"stage{k + 1}_{s.name}.safetensors") for k, s in enumerate(cur.stages[: state.stage_index])]

    while state.stage_index < len(cur.stages):
        k = state.stage_index
        stage = cur.stages[k]
        ds = datasets[(stage.tier, stage.data_quality)]
        snap = out / f"nan_snapshot_{stage.name}.safetensors" if out is not None else None
        step_cb = log
        if checkpoint_every and out is not None:
            # pause every `checkpoint_every` steps to write a resumable state
            while state.stage_index == k:
                target = min(stage.iterations, state.stage_step + checkpoint_every)
                state = run_stage(model, stage, ds, state, ctx, stop_after=target, eval_fn=eval_fn,
                                  eval_every=eval_every, snapshot_path=snap, log=step_cb)
                if state.stage_index == k:
                    save_training_checkpoint(last, model, ctx, state, cur, stage)
        else:
            state = run_stage(model, stage, ds, state, ctx, eval_fn=eval_fn, eval_every=eval_every,
                              snapshot_path=snap, log=step_cb)
        if eval_fn is not None:
            state.evals.append({"stage": stage.name, "step": state.global_step, "end_of_stage": True, **eval_fn(model)})
        if out is not None:
            p = out / f"stage{k + 1}_{stage.name}.safetensors"
            save_training_checkpoint(p, model, ctx, state, cur, stage)
            save_training_checkpoint(last, model, ctx, state, cur, stage)
            ckpts.append(str(p))
    report = strategy_report(cur, state)
    if out is not None:
        write_report(report, out)
    return (ckpts[-1] if ckpts else None), report


def strategy_report(cur: Curriculum, state: TrainState) -> dict:
    final = next((e for e in reversed(state.evals) if e.get("end_of_stage")), None)
    return {
        "strategy": cur.strategy,
        "seed": state.seed,
        "stages": [asdict(s) for s in cur.stages],
        "total_steps": state.global_step,
        "final_eval": {k: v for k, v in (final or {}).items() if k in ("psnr", "eval_loss")},
        "history": state.history,
        "evals": state.evals,
    }


def write_report(report: dict, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    steps = [h["step"] for h in report["history"]]
    losses = [h["loss"] for h in report["history"]]
    if losses:
        w = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax[0].plot(steps[w - 1 :], smooth)
    ax[0].set_xlabel("step")
    ax[0].set_ylabel("train loss")
    ev = [e for e in report["evals"] if "eval_loss" in e]
    if ev:
        ax[1].plot([e["step"] for e in ev], [e["eval_loss"] for e in ev], "o-")
    ax[1].set_xlabel("step")
    ax[1].set_ylabel("eval loss")
    fig.suptitle(report["strategy"])
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=80)
    plt.close(fig)
