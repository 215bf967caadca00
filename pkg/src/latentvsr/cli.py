"""Command-line entry point: gen-data, train, restore, evaluate, ablate, replay.

Every command writes a ``run_manifest.json`` into its output directory
recording the arguments, the config hash and sha256 hashes of the
outputs. ``latentvsr replay <manifest>`` re-executes a run into a new
directory and compares hashes.

Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 contract
error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import sha256_file
from .degradation import TIERS, DegradationConfig
from .denoiser import DenoiserConfig, VideoDenoiser
from .diffusion import build_schedule
from .errors import ConfigError, VSRError
from .ilt import plan_windows, restore_video
from .metrics import evaluate_clip
from .synthetic import MOTIONS, ClipDataset, make_synthetic_dataset
from .trainer import (
    TrainContext,
    checkpoint_meta,
    load_model_checkpoint,
    make_curriculum,
    model_tensors,
    pretrain_spatial_prior,
    required_datasets,
    run_curriculum,
)
from .checkpoint import save_checkpoint
from .vae import VaeConfig, VideoVAE, calibrate_latent_scale, train_vae
from .video import read_video, save_clip, save_frames_png

log = logging.getLogger("latentvsr")

MANIFEST = "run_manifest.json"
SUITE_DATASETS = [
    ("bicubic_only_base", "bicubic_only", "base", 1),
    ("simple_base", "simple", "base", 2),
    ("complex_base", "complex", "base", 3),
    ("complex_high", "complex", "high", 4),
    ("val", "complex", "base", 5),
]


# -- manifests


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, cfg: Optional[dict], started: float,
                   outputs: list) -> Path:
    out_dir = Path(out_dir)
    hashes = {}
    for p in sorted(outputs):
        p = Path(p)
        if p.is_file():
            hashes[str(p.relative_to(out_dir))] = sha256_file(p)
    argd = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func",)}
    man = {
        "command": command,
        "args": argd,
        "config_path": argd.get("config"),
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg) if cfg is not None else None,
        "seed": argd.get("seed"),
        "output_dir": str(out_dir),
        "outputs": hashes,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(man, indent=1, sort_keys=True))
    return path


def _prepare_out(out: Path, force: bool, allow_existing: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not allow_existing:
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(root: Path, name: str) -> ClipDataset:
    d = Path(root) / name
    if not (d / "manifest.jsonl").exists():
        raise ConfigError(f"dataset {d} missing; create it with `latentvsr gen-data --suite --out {root}`")
    return ClipDataset.load(d)


# -- gen-data


def cmd_gen_data(args) -> int:
    started = time.time()
    out = _prepare_out(args.out, args.force)
    written = []
    if args.suite:
        specs = [(name, tier, q, off) for name, tier, q, off in SUITE_DATASETS]
    else:
        specs = [(None, args.tier, args.quality, 0)]
    for name, tier, quality, off in specs:
        cfg = DegradationConfig(tier=tier, seed=args.seed * 100 + off)
        n = args.val_clips if name == "val" else args.n_clips
        ds = make_synthetic_dataset(n, args.motion, cfg, seed=args.seed * 100 + off, frames=args.frames,
                                    quality=quality)
        d = ds.save(out / name if name else out)
        written += [p for p in d.iterdir() if p.is_file()]
        print(f"wrote {len(ds)} clips ({tier}/{quality}) to {d}")
    write_manifest(out, "gen-data", args, None, started, written)
    return 0


# -- train


def _save_vae(out: Path, vae: VideoVAE) -> None:
    # standalone autoencoder checkpoint; denoiser checkpoints also embed it
    save_checkpoint(out / "vae.safetensors", vae.state_dict(), {"kind": "vae", "vae": vae.cfg.to_dict()})


def _build_fresh(cfg: dict, data_root: Path, seed: int, out: Path):
    """Train the autoencoder and the spatial prior from scratch; save prior.safetensors."""
    sched = build_schedule(cfg["schedule"]["kind"], cfg["schedule"]["timesteps"])
    torch.manual_seed(seed)
    vae = VideoVAE(VaeConfig(**cfgmod.vae_fields(cfg)))
    base = _load_dataset(data_root, "bicubic_only_base")
    v = cfg["vae"]
    if v["train_steps"]:
        hist = train_vae(vae, base, v["train_steps"], batch=v["train_batch"], lr=v["train_lr"], seed=seed)
        print(f"vae: {v['train_steps']} steps, final loss {hist[-1][1]:.4f}")
    vae.eval()
    calibrate_latent_scale(vae, torch.cat([base.hr[i][:8] for i in range(min(4, len(base)))]))
    _save_vae(out, vae)
    torch.manual_seed(seed + 1)
    model = VideoDenoiser(DenoiserConfig.from_dict(cfg["model"]))
    t = cfg["train"]
    ctx = TrainContext.build(vae, sched, patch=t["patch"], stride_range=tuple(t["stride_range"]))
    if t["prior_steps"]:
        st = pretrain_spatial_prior(model, base, t["prior_steps"], ctx, seed=seed, lr=t["prior_lr"], batch=t["batch"])
        print(f"spatial prior: {t['prior_steps']} steps, final loss {st.history[-1]['loss']:.4f}")
    save_checkpoint(out / "prior.safetensors", model_tensors(model, vae), checkpoint_meta(model, ctx, {"stage": None}))
    return model, ctx


def cmd_train(args) -> int:
    started = time.time()
    overrides: dict = {"train": {}, "model": {}, "vae": {}}
    if args.strategy:
        overrides["train"]["strategy"] = args.strategy
    if args.steps is not None:
        overrides["train"]["total_steps"] = args.steps
    if args.prior_steps is not None:
        overrides["train"]["prior_steps"] = args.prior_steps
    if args.vae_steps is not None:
        overrides["vae"]["train_steps"] = args.vae_steps
    if args.eval_every is not None:
        overrides["train"]["eval_every"] = args.eval_every
    if args.batch is not None:
        overrides["train"]["batch"] = args.batch
    if args.msta is not None:
        overrides["model"]["msta_enabled"] = args.msta == "on"
    if args.vae_variant is not None:
        overrides["vae"]["variant"] = args.vae_variant
    if args.seed is not None:
        overrides["seed"] = args.seed
    path = args.config or cfgmod.default_config_path(args.strategy or "pls3")
    cfg = cfgmod.load_config(path, {k: v for k, v in overrides.items() if v != {}})
    seed = cfg["seed"]
    t = cfg["train"]
    out = _prepare_out(args.out, args.force, allow_existing=args.resume)
    data_root = Path(args.data)
    cur = make_curriculum(t["strategy"], t["total_steps"], t["lr"], t["batch"])
    datasets = {}
    for tier, quality in required_datasets(cur):
        datasets[(tier, quality)] = _load_dataset(data_root, f"{tier}_{quality}")
    val = _load_dataset(data_root, "val") if (data_root / "val").exists() else None

    if args.resume or args.init:
        src = Path(args.init) if args.init else out / "prior.safetensors"
        if not src.exists():
            raise ConfigError(f"cannot start from {src}: file not found")
        model, vae, sched, meta, _ = load_model_checkpoint(src)
        ctx = TrainContext.build(vae, sched, patch=t["patch"], stride_range=tuple(t["stride_range"]))
        if args.init and not args.resume:
            _save_vae(out, vae)
            save_checkpoint(out / "prior.safetensors", model_tensors(model, vae), checkpoint_meta(model, ctx, {"stage": None}))
    else:
        model, ctx = _build_fresh(cfg, data_root, seed, out)

    def progress(state):
        if state.global_step % 100 == 0:
            print(f"step {state.global_step}: loss {state.history[-1]['loss']:.4f}", flush=True)

    ckpt, report = run_curriculum(model, cur, datasets, seed, ctx, out_dir=out, val=val, eval_every=t["eval_every"],
                                  eval_steps=t["eval_steps"], resume=args.resume,
                                  checkpoint_every=t["checkpoint_every"], log=progress)
    (out / "config.yaml").write_text(cfgmod.dump_config(cfg))
    print(f"{t['strategy']}: {report['total_steps']} steps; final eval {report['final_eval']}; checkpoint {ckpt}")
    outputs = sorted(out.glob("*.safetensors")) + [out / "report.json", out / "config.yaml"]
    write_manifest(out, "train", args, cfg, started, outputs)
    return 0


# -- restore / evaluate


def _restore(model, vae, sched, lr, *, ilt: bool, window_len: int, overlap: int, steps: int, seed: int,
             fusion: str = "per_step", noise: str = "shared") -> torch.Tensor:
    if not ilt:
        fusion, noise = "none", "independent"
    return restore_video(lr, model, vae, sched, window_len=window_len, overlap=overlap, seed=seed, steps=steps,
                         fusion=fusion, noise=noise)


def cmd_restore(args) -> int:
    started = time.time()
    out = _prepare_out(args.out, args.force)
    model, vae, sched, meta, _ = load_model_checkpoint(args.ckpt)
    lr = read_video(args.input).float()
    plan = plan_windows(lr.shape[0], args.window_len, args.overlap)
    print(f"windows: {len(plan.windows)} (starts {plan.starts})")
    res = _restore(model, vae, sched, lr, ilt=not args.no_ilt, window_len=args.window_len, overlap=args.overlap,
                   steps=args.steps, seed=args.seed, fusion=args.fusion, noise=args.noise)
    outputs = [out / "restored.npy"]
    save_clip(out / "restored.npy", res)
    if args.png:
        outputs += save_frames_png(out / "frames", res)
    if args.hr or args.motion:
        hr = read_video(args.hr).float() if args.hr else None
        motion = torch.from_numpy(np.load(args.motion)) if args.motion else None
        rep = evaluate_clip(res, hr, motion)
        (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
        outputs.append(out / "metrics.json")
        print(json.dumps({"psnr": rep.psnr, "warp_error": rep.warp_error}))
    write_manifest(out, "restore", args, None, started, outputs)
    return 0


def cmd_evaluate(args) -> int:
    clip = read_video(args.input).float()
    hr, motion = None, None
    if args.dataset is not None:
        ds = ClipDataset.load(args.dataset)
        hr = ds.hr[args.clip][: clip.shape[0]]
        motion = ds.motion_field(args.clip)[: clip.shape[0] - 1]
    if args.hr:
        hr = read_video(args.hr).float()
    if args.motion:
        motion = torch.from_numpy(np.load(args.motion))
    rep = evaluate_clip(clip, hr, motion)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(json.dumps({"psnr": rep.psnr, "warp_error": rep.warp_error, "flicker": rep.flicker}))
    return 0


# -- ablate


def evaluate_on_dataset(model, vae, sched, ds: ClipDataset, *, ilt: bool, n_clips: int, frames: int, steps: int,
                        seed: int, window_len: int = 8, overlap: int = 4) -> dict:
    ps, ws = [], []
    for i in range(min(n_clips, len(ds))):
        lr = ds.lr[i][:frames]
        res = _restore(model, vae, sched, lr, ilt=ilt, window_len=window_len, overlap=overlap, steps=steps, seed=seed + i)
        rep = evaluate_clip(res, ds.hr[i][:frames], ds.motion_field(i)[: frames - 1])
        ps.append(rep.psnr)
        ws.append(rep.warp_error)
    return {"psnr": float(np.mean(ps)), "warp_error": float(np.mean(ws))}


def _arch_run(msta: bool, vae: str) -> str:
    return f"arch_{'msta' if msta else 'nomsta'}_{vae}"


def ablation_plan(suite: str) -> list:
    """(row label, run directory name, arch, pls, ilt) for each row of the suite."""
    if suite == "ilt":
        return [("without ILT", "pls3", "MSTA+TE-3DVAE", "yes", "no"), ("with ILT", "pls3", "MSTA+TE-3DVAE", "yes", "yes")]
    if suite == "pls":
        return [("direct", "direct", "MSTA+TE-3DVAE", "no", "yes"), ("pls3", "pls3", "MSTA+TE-3DVAE", "yes", "yes")]
    if suite == "arch":
        rows = []
        for msta in (False, True):
            for vae in ("vae2d", "te3dvae"):
                arch = ("MSTA" if msta else "no MSTA") + "+" + ("TE-3DVAE" if vae == "te3dvae" else "2D VAE")
                rows.append((arch, _arch_run(msta, vae), arch, "yes", "yes"))
        return rows
    raise ConfigError(f"unknown ablation suite {suite!r}")


def _train_hint(run: str, data: str, runs: Path) -> str:
    if run.startswith("arch_"):
        _, m, v = run.split("_", 2)
        return (f"latentvsr train --strategy pls3 --msta {'on' if m == 'msta' else 'off'} --vae-variant {v} "
                f"--data {data} --out {runs / run}")
    return f"latentvsr train --strategy {run} --data {data} --out {runs / run}"


def cmd_ablate(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    started = time.time()
    runs = Path(args.runs)
    plan = ablation_plan(args.suite)
    missing = sorted({r for _, r, *_ in plan if not (runs / r / "last.safetensors").exists()})
    if not (Path(args.data) / "val" / "manifest.jsonl").exists():
        raise ConfigError(f"ablation needs a validation set; run:\n  latentvsr gen-data --suite --out {args.data}")
    if missing:
        steps = "\n".join("  " + _train_hint(r, args.data, runs) for r in missing)
        raise ConfigError(f"ablation suite {args.suite!r} needs these runs first:\n{steps}")
    out = _prepare_out(args.out, args.force)
    val = ClipDataset.load(Path(args.data) / "val")
    rows = []
    for label, run, arch, pls, ilt in plan:
        model, vae, sched, _, _ = load_model_checkpoint(runs / run / "last.safetensors")
        m = evaluate_on_dataset(model, vae, sched, val, ilt=ilt == "yes", n_clips=args.clips, frames=args.frames,
                                steps=args.steps, seed=args.seed)
        rows.append({"row": label, "run": run, "Arch": arch, "PLS": pls, "ILT": ilt, **m})
        print(f"{label}: psnr {m['psnr']:.3f} warp {m['warp_error']:.3f}", flush=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    lines = ["| row | Arch | PLS | ILT | PSNR | warp error (1e-3) |", "|---|---|---|---|---|---|"]
    lines += [f"| {r['row']} | {r['Arch']} | {r['PLS']} | {r['ILT']} | {r['psnr']:.3f} | {r['warp_error']:.3f} |" for r in rows]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for r in rows:
        ax.scatter(r["warp_error"], r["psnr"])
        ax.annotate(r["row"], (r["warp_error"], r["psnr"]), fontsize=7)
    ax.set_xlabel("warp error (1e-3), lower is better")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out / "tradeoff.png", dpi=80)
    plt.close(fig)
    print("\n".join(lines))
    write_manifest(out, "ablate", args, None, started, [out / "ablation.json", out / "ablation.md", out / "tradeoff.png"])
    return 0


# -- replay


def cmd_replay(args) -> int:
    man = json.loads(Path(args.manifest).read_text())
    stored = dict(man["args"])
    stored["out"] = args.out
    stored["force"] = True
    if "resume" in stored:
        stored["resume"] = False
    argv = _argv_from(man["command"], stored)
    print("replaying: latentvsr " + " ".join(argv))
    code = main(argv)
    if code:
        return code
    new = json.loads((Path(args.out) / MANIFEST).read_text())
    diff = sorted(k for k in set(man["outputs"]) | set(new["outputs"]) if man["outputs"].get(k) != new["outputs"].get(k))
    if diff:
        print("output hashes differ: " + ", ".join(diff))
        return 1
    print(f"all {len(new['outputs'])} output hashes identical")
    return 0


def _argv_from(command: str, stored: dict) -> list:
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    argv = [command]
    for action in sub._actions:
        if action.dest in ("help",) or action.dest not in stored:
            continue
        v = stored[action.dest]
        flag = action.option_strings[0] if action.option_strings else None
        if flag is None:
            argv.append(str(v))
        elif isinstance(action, argparse._StoreTrueAction):
            if v:
                argv.append(flag)
        elif v is not None:
            argv += [flag, str(v)]
    return argv


# -- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentvsr", description="Toy latent video diffusion super-resolution.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic degraded clips with known motion")
    g.add_argument("--out", required=True)
    g.add_argument("--suite", action="store_true", help="write every dataset training and ablation need")
    g.add_argument("--tier", choices=TIERS, default="complex")
    g.add_argument("--quality", choices=("base", "high"), default="base")
    g.add_argument("--n-clips", type=int, default=32)
    g.add_argument("--val-clips", type=int, default=16)
    g.add_argument("--frames", type=int, default=48)
    g.add_argument("--motion", choices=MOTIONS, default="mixed")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a training curriculum")
    t.add_argument("--data", required=True, help="dataset root written by gen-data --suite")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--strategy", choices=("pls3", "two_stage", "direct"), default=None)
    t.add_argument("--steps", type=int, default=None, help="total curriculum steps")
    t.add_argument("--prior-steps", type=int, default=None)
    t.add_argument("--vae-steps", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=None)
    t.add_argument("--msta", choices=("on", "off"), default=None)
    t.add_argument("--vae-variant", choices=("vae2d", "vae3d", "te3dvae"), default=None)
    t.add_argument("--init", default=None, help="start from this checkpoint instead of training a prior")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="super-resolve a low-resolution clip")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help=".npy (T, 3, h, w) or a directory of PNG frames")
    r.add_argument("--out", required=True)
    r.add_argument("--window-len", type=int, default=8)
    r.add_argument("--overlap", type=int, default=4)
    r.add_argument("--steps", type=int, default=20)
    r.add_argument("--fusion", choices=("per_step", "final", "none"), default="per_step")
    r.add_argument("--noise", choices=("shared", "reorder", "independent"), default="shared")
    r.add_argument("--no-ilt", action="store_true", help="independent noise and no fusion")
    r.add_argument("--hr", default=None)
    r.add_argument("--motion", default=None)
    r.add_argument("--png", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("evaluate", help="PSNR / warp error / flicker of a restored clip")
    e.add_argument("--input", required=True)
    e.add_argument("--hr", default=None)
    e.add_argument("--motion", default=None)
    e.add_argument("--dataset", default=None, help="take HR and motion from this dataset")
    e.add_argument("--clip", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="component ablation table and tradeoff plot")
    a.add_argument("--suite", choices=("pls", "ilt", "arch"), required=True)
    a.add_argument("--runs", required=True, help="directory holding one subdirectory per training run")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--clips", type=int, default=4)
    a.add_argument("--frames", type=int, default=16)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("replay", help="re-run a command from its manifest and compare output hashes")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except VSRError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
