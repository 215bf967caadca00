import numpy as np
import pytest
import torch

from latentvsr.denoiser import (
    DenoiserConfig,
    MSTABlock,
    TemporalBlock,
    VideoDenoiser,
    classify_param,
    msta_block,
    param_groups,
    set_trainable,
)
from latentvsr.diffusion import Conditioning
from latentvsr.errors import ConfigError, ContractError


def _randomize(module, seed=0, scale=0.2):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _inputs(B=None, T=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    lead = (T,) if B is None else (B, T)
    z = torch.randn(*lead, 4, 16, 16, generator=g, dtype=dtype)
    x = torch.randn(*lead, 3, 16, 16, generator=g, dtype=dtype)
    return z, Conditioning(x, 10, torch.zeros(8, dtype=dtype))


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(msta_alpha=1.5).validate()
    with pytest.raises(ConfigError):
        DenoiserConfig(depth=0).validate()
    with pytest.raises(ConfigError):
        DenoiserConfig(msta_fusion="other").validate()


@pytest.mark.parametrize("shape", [(1, 8, 5, 5), (3, 8, 8, 8), (8, 16, 7, 9), (5, 4, 2, 3), (2, 8, 1, 1)])
def test_msta_shape_preservation(shape):
    T, C = shape[:2]
    cfg = DenoiserConfig(temporal_heads=2 if C % 2 == 0 else 1)
    blk = _randomize(MSTABlock(C, 6, cfg.temporal_heads), seed=T)
    out = msta_block(torch.randn(shape), cfg, blk, emb=torch.randn(T, 6))
    assert out.shape == shape


def test_msta_zero_frames_rejected():
    with pytest.raises(ContractError):
        msta_block(torch.zeros(0, 8, 4, 4), DenoiserConfig())


def test_msta_alpha_zero_is_native_branch():
    blk = _randomize(MSTABlock(8, 6, 2, alpha=0.0))
    h, emb = torch.randn(4, 8, 6, 6), torch.randn(4, 6)
    h_ori, _ = blk.branches(h, emb, 4)
    assert torch.equal(blk(h, emb, 4), h_ori)


def test_msta_affine_in_alpha():
    blk = _randomize(MSTABlock(8, 6, 2), seed=3)
    h, emb = torch.randn(4, 8, 6, 6, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    blk.double()
    outs = []
    for a in (0.0, 0.5, 1.0):
        blk.alpha = a
        outs.append(blk(h, emb, 4))
    assert torch.allclose(outs[1], 0.5 * (outs[0] + outs[2]), atol=1e-12)


def test_msta_disabled_returns_native_branch():
    cfg = DenoiserConfig(msta_enabled=False)
    blk = _randomize(TemporalBlock(8, 6, 2))
    h = torch.randn(4, 8, 5, 5)
    assert torch.equal(msta_block(h, cfg, blk), blk(h, None, 4))


def test_msta_identity_at_init_single_frame():
    # zero-initialized attention and up-projection leave only the residual path
    blk = MSTABlock(8, 6, 2)
    h = torch.randn(1, 8, 7, 7)
    assert (blk(h, torch.randn(1, 6), 1) - h).abs().max() < 1e-5


def test_msta_printed_fusion_selectable():
    blk = _randomize(MSTABlock(8, 6, 2, fusion="printed"))
    h = torch.randn(2, 8, 6, 6)
    _, h_down = blk.branches(h, None, 2)
    expected = torch.nn.functional.interpolate(h_down, scale_factor=2, mode="nearest")
    expected = expected + 0.5 * blk.msta_up(expected)
    assert torch.allclose(blk(h, None, 2), expected, atol=1e-6)


def _fd_check(fn, param, idx_list, h=1e-6, rel=1e-3):
    loss = fn()
    (grad,) = torch.autograd.grad(loss, param)
    for idx in idx_list:
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + h
            up = fn().item()
            param[idx] = orig - h
            dn = fn().item()
            param[idx] = orig
        fd = (up - dn) / (2 * h)
        assert grad[idx].item() == pytest.approx(fd, rel=rel, abs=1e-8)


def test_msta_gradient_check():
    blk = _randomize(MSTABlock(4, 3, 2), seed=9).double()
    h, emb = torch.randn(3, 4, 5, 5, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64)
    for p in (blk.attn.qkv.weight, blk.msta_down.weight, blk.msta_up.weight):
        idx = [tuple(np.unravel_index(i, p.shape)) for i in (0, p.numel() // 2, p.numel() - 1)]
        _fd_check(lambda: (blk(h, emb, 3) ** 2).sum(), p, idx)


def test_forward_shape_determinism_and_batch_independence():
    model = _randomize(VideoDenoiser(DenoiserConfig()), scale=0.1).eval()
    z, cond = _inputs()
    a, b = model(z, cond, 100), model(z, cond, 100)
    assert a.shape == z.shape and torch.equal(a, b)
    zz = torch.stack([z, z])
    cc = Conditioning(torch.stack([cond.lr_latent] * 2), cond.tau, cond.embed)
    out = model(zz, cc, torch.tensor([100, 100]))
    assert torch.allclose(out[0], a, atol=1e-6, rtol=0) and torch.allclose(out[1], a, atol=1e-6, rtol=0)
    assert torch.equal(out[0], out[1])


def test_forward_geometry_errors():
    model = VideoDenoiser(DenoiserConfig())
    z, cond = _inputs()
    with pytest.raises(ContractError):
        model(z[:, :3], cond, 5)
    with pytest.raises(ContractError):
        model(z, Conditioning(cond.lr_latent[:4], 5), 5)
    with pytest.raises(ContractError):
        model(z, Conditioning(cond.lr_latent, 5, torch.zeros(3)), 5)


def test_forward_weight_gradient_finite_differences():
    model = _randomize(VideoDenoiser(DenoiserConfig(base_channels=8, depth=2)), seed=4, scale=0.15).double()
    z, cond = _inputs(T=3, dtype=torch.float64)
    z, x = z[..., :8, :8], cond.lr_latent[..., :8, :8]
    cond = Conditioning(x, 10, cond.embed)
    named = dict(model.named_parameters())
    for name in ("conv_in.weight", "down.1.temporal.attn.qkv.weight", "up.0.res.conv1.weight"):
        p = named[name]
        idx = [tuple(np.unravel_index(i, p.shape)) for i in (1, p.numel() // 3)]
        _fd_check(lambda: model(z, cond, 300).sum(), p, idx)


def test_param_groups_partition():
    model = VideoDenoiser(DenoiserConfig(depth=2))
    g = param_groups(model)
    total = sum(1 for _ in model.parameters())
    assert len(g.spatial) + len(g.temporal) == total
    assert not set(g.spatial) & set(g.temporal)
    assert any("msta" in n for n in g.temporal)
    assert all("temporal" in n.split(".") for n in g.temporal)


def test_param_groups_without_msta():
    g = param_groups(VideoDenoiser(DenoiserConfig(msta_enabled=False)))
    assert not any("msta" in n for n in g.temporal)
    assert g.temporal


def test_unclassifiable_parameter_fails_loudly():
    model = VideoDenoiser(DenoiserConfig())
    model.extra = torch.nn.Linear(2, 2)
    with pytest.raises(RuntimeError):
        param_groups(model)
    assert classify_param("down.0.temporal.attn.qkv.weight") == "temporal"


def test_freeze_spatial_then_step():
    model = _randomize(VideoDenoiser(DenoiserConfig()), scale=0.1)
    params = set_trainable(model, "temporal_only")
    groups = param_groups(model)
    before = {n: p.detach().clone() for n, p in groups.spatial.items()}
    before_t = {n: p.detach().clone() for n, p in groups.temporal.items()}
    opt = torch.optim.AdamW(params, lr=1e-3)
    z, cond = _inputs(B=2)
    for _ in range(3):
        loss = model(z, cond, torch.tensor([50, 500])).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    for n, p in groups.spatial.items():
        assert torch.equal(p, before[n]), n
    assert any(not torch.equal(p, before_t[n]) for n, p in groups.temporal.items())
