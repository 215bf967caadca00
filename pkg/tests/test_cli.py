import json

import numpy as np
import pytest
import torch
import yaml

from latentvsr.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint, sha256_file
from latentvsr.cli import ablation_plan, main
from latentvsr.config import DEFAULTS, load_config
from latentvsr.errors import ConfigError

TINY = {
    "version": 1,
    "seed": 0,
    "schedule": {"kind": "cosine", "timesteps": 100},
    "model": {"base_channels": 8, "timesteps": 100},
    "vae": {"variant": "vae2d", "train_steps": 2, "train_batch": 1},
    "train": {"total_steps": 3, "prior_steps": 2, "batch": 1, "checkpoint_every": 2, "stride_range": [1, 2],
              "eval_steps": 2},
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--suite", "--out", str(root), "--n-clips", "2", "--val-clips", "2", "--frames", "16",
                 "--force"]) == 0
    return root


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def trained(data, cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "pls3"
    assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg_path), "--strategy", "pls3"]) == 0
    return out


def test_gen_data_manifest(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--tier", "simple", "--n-clips", "3", "--frames", "4"]) == 0
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 3 and all(json.loads(l)["tier"] == "simple" for l in lines)
    h1 = json.loads((out / "run_manifest.json").read_text())["outputs"]
    # refusal without --force, identical hashes with it
    assert main(["gen-data", "--out", str(out), "--tier", "simple", "--n-clips", "3", "--frames", "4"]) == 2
    assert main(["gen-data", "--out", str(out), "--tier", "simple", "--n-clips", "3", "--frames", "4", "--force"]) == 0
    assert json.loads((out / "run_manifest.json").read_text())["outputs"] == h1


def test_gen_data_sixteen_clips(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n-clips", "16", "--frames", "2"]) == 0
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 16


def test_config_validation(tmp_path):
    assert load_config()["train"]["lr"] == 1e-4
    bad = tmp_path / "bad.yaml"
    for doc in ({"version": 2}, {"seed": 1}, {"version": 1, "trian": {}}, {"version": 1, "train": {"strategy": "x"}},
                {"version": 1, "inference": {"overlap": 8}}):
        bad.write_text(yaml.safe_dump(doc))
        with pytest.raises(ConfigError):
            load_config(bad)
    assert set(DEFAULTS) == {"version", "seed", "data", "schedule", "model", "vae", "train", "inference"}


def test_checkpoint_roundtrip_bytes(tmp_path):
    g = torch.Generator().manual_seed(0)
    t = {"a.w": torch.randn(3, 4, generator=g), "b": torch.arange(5)}
    p1, p2 = tmp_path / "1.safetensors", tmp_path / "2.safetensors"
    save_checkpoint(p1, t, {"kind": "x", "nested": {"z": 1, "a": [1, 2]}})
    tensors, meta = load_checkpoint(p1)
    meta.pop("format_version")
    save_checkpoint(p2, tensors, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_refusal(tmp_path):
    p = tmp_path / "c.safetensors"
    save_checkpoint(p, {"x": torch.zeros(1)}, {"kind": "x", "format_version": FORMAT_VERSION + 1})
    with pytest.raises(ConfigError, match=str(FORMAT_VERSION + 1)):
        load_checkpoint(p)


def test_train_outputs(trained):
    names = sorted(p.name for p in trained.glob("stage*.safetensors"))
    assert len(names) == 3
    rep = json.loads((trained / "report.json").read_text())
    assert rep["strategy"] == "pls3" and rep["total_steps"] == 3
    man = json.loads((trained / "run_manifest.json").read_text())
    assert man["command"] == "train" and "report.json" in man["outputs"] and man["config_hash"]
    tensors, meta = load_checkpoint(trained / "vae.safetensors")
    assert meta["kind"] == "vae" and meta["vae"]["variant"] == "vae2d" and "vae.safetensors" in man["outputs"]
    assert all(not k.startswith("model.") for k in tensors)


def test_train_direct_budget(data, cfg_path, tmp_path):
    out = tmp_path / "direct"
    assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg_path), "--strategy", "direct",
                 "--steps", "2"]) == 0
    assert json.loads((out / "report.json").read_text())["total_steps"] == 2
    assert len(list(out.glob("stage*.safetensors"))) == 1


def test_train_missing_data(cfg_path, tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o"), "--config",
                 str(cfg_path)]) == 2


def test_train_resume_matches(data, cfg_path, tmp_path, monkeypatch):
    import latentvsr.trainer as tr

    base = ["train", "--data", str(data), "--config", str(cfg_path), "--strategy", "direct", "--steps", "4"]
    assert main(base + ["--out", str(tmp_path / "full")]) == 0

    real = tr.save_training_checkpoint
    calls = []

    def crash_after_first(*a, **k):
        real(*a, **k)
        calls.append(1)
        raise KeyboardInterrupt

    monkeypatch.setattr(tr, "save_training_checkpoint", crash_after_first)
    with pytest.raises(KeyboardInterrupt):
        main(base + ["--out", str(tmp_path / "cut")])
    monkeypatch.setattr(tr, "save_training_checkpoint", real)
    assert load_checkpoint(tmp_path / "cut" / "last.safetensors")[1]["train_state"]["stage_step"] == 2
    assert main(base + ["--out", str(tmp_path / "cut"), "--resume"]) == 0
    a, b = tmp_path / "full" / "stage1_stage1.safetensors", tmp_path / "cut" / "stage1_stage1.safetensors"
    assert sha256_file(a) == sha256_file(b)
    assert main(base + ["--out", str(tmp_path / "none"), "--resume"]) == 2


def test_restore_paths(trained, data, tmp_path, capsys):
    from latentvsr.synthetic import ClipDataset

    val = ClipDataset.load(data / "val")
    np.save(tmp_path / "lr8.npy", val.lr[0][:8].numpy())
    np.save(tmp_path / "lr16.npy", val.lr[0][:16].numpy())
    np.save(tmp_path / "hr16.npy", val.hr[0][:16].numpy())
    np.save(tmp_path / "mot16.npy", val.motion_field(0)[:15].numpy())
    ck = str(trained / "last.safetensors")
    assert main(["restore", "--ckpt", ck, "--input", str(tmp_path / "lr8.npy"), "--out", str(tmp_path / "a"),
                 "--steps", "2"]) == 0
    assert "windows: 1" in capsys.readouterr().out
    assert np.load(tmp_path / "a" / "restored.npy").shape == (8, 3, 64, 64)
    assert main(["restore", "--ckpt", ck, "--input", str(tmp_path / "lr16.npy"), "--out", str(tmp_path / "b"),
                 "--steps", "2", "--hr", str(tmp_path / "hr16.npy"), "--motion", str(tmp_path / "mot16.npy"), "--png"]) == 0
    assert "windows: 3" in capsys.readouterr().out
    m = json.loads((tmp_path / "b" / "metrics.json").read_text())
    assert m["psnr"] is not None and m["warp_error"] is not None
    assert len(list((tmp_path / "b" / "frames").glob("*.png"))) == 16
    assert main(["restore", "--ckpt", ck, "--input", str(tmp_path / "lr16.npy"), "--out", str(tmp_path / "c"),
                 "--steps", "2", "--no-ilt", "--hr", str(tmp_path / "hr16.npy")]) == 0
    assert json.loads((tmp_path / "c" / "metrics.json").read_text())["psnr"] is not None
    assert main(["evaluate", "--input", str(tmp_path / "b" / "restored.npy"), "--dataset", str(data / "val"),
                 "--clip", "0"]) == 0


def test_restore_contract_error_exit_code(trained, tmp_path):
    np.save(tmp_path / "short.npy", np.zeros((4, 3, 16, 16), dtype=np.float32))
    assert main(["restore", "--ckpt", str(trained / "last.safetensors"), "--input", str(tmp_path / "short.npy"),
                 "--out", str(tmp_path / "o")]) == 3


def test_replay_reproduces_hashes(trained, tmp_path):
    assert main(["replay", str(trained / "run_manifest.json"), "--out", str(tmp_path / "again")]) == 0


def test_ablation_plans():
    assert len(ablation_plan("ilt")) == 2 and len(ablation_plan("arch")) == 4 and len(ablation_plan("pls")) == 2
    assert {r[3] for r in ablation_plan("pls")} == {"yes", "no"}


def test_ablate_missing_lists_runs(data, tmp_path, capsys):
    assert main(["ablate", "--suite", "arch", "--runs", str(tmp_path), "--data", str(data), "--out",
                 str(tmp_path / "ab")]) == 2
    err = capsys.readouterr().err
    assert err.count("latentvsr train") == 4


def test_ablate_ilt(trained, data, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--suite", "ilt", "--runs", str(trained.parent), "--data", str(data), "--out", str(out),
                 "--clips", "1", "--steps", "2"]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["ILT"] for r in rows] == ["no", "yes"]
    assert {"Arch", "PLS", "ILT"} <= set(rows[0])
    assert (out / "tradeoff.png").exists()
