from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentvsr import kernels
from latentvsr.denoiser import DenoiserConfig, VideoDenoiser
from latentvsr.diffusion import build_schedule
from latentvsr.errors import ConfigError, ContractError
from latentvsr.ilt import NoisePool, fuse_overlap, fusion_weights, plain_restore, plan_windows, restore_video
from latentvsr.vae import VaeConfig, VideoVAE
from latentvsr.video import LatentSequence


def test_fusion_weights_p4_exact():
    # oracle: exact rationals 1 - j/3
    expect = [float(1 - Fraction(j, 3)) for j in range(4)]
    assert fusion_weights(4).tolist() == expect


@given(st.integers(2, 64))
def test_fusion_weight_algebra(P):
    w = fusion_weights(P)
    assert w[0] == 1.0 and w[-1] == 0.0
    assert np.all(np.diff(w) < 0)
    assert np.all(w + (1 - w) == 1.0)


def test_fusion_weights_reject_p1():
    with pytest.raises(ContractError):
        fusion_weights(1)


def _coverage_oracle(T, starts, N):
    cov = [0] * T
    for s in starts:
        for f in range(s, s + N):
            cov[f] += 1
    return cov


def test_plan_single_window():
    p = plan_windows(8, 8, 4)
    assert p.starts == [0] and p.stride == 4


def test_plan_two_windows():
    p = plan_windows(12, 8, 4)
    assert p.starts == [0, 4]
    assert _coverage_oracle(12, [0, 4], 8) == p.coverage().tolist()
    assert [f for f in range(12) if p.coverage()[f] == 2] == [4, 5, 6, 7]


def test_plan_three_windows_noise_consistency():
    p = plan_windows(16, 8, 4)
    assert p.starts == [0, 4, 8]
    assert p.noise_assignment[2][:4] == p.noise_assignment[1][-4:]
    assert p.noise_assignment[1][:4] == p.noise_assignment[0][-4:]
    # fresh draws elsewhere
    assert p.pool_size == 16


def test_plan_ragged_tail_right_aligned():
    p = plan_windows(14, 8, 4)
    assert p.starts == [0, 4, 6]
    assert p.actual_overlap(1) == 6
    assert p.noise_assignment[2][:6] == p.noise_assignment[1][-6:]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.data())
def test_plan_invariants(N, data):
    P = data.draw(st.integers(1, N - 1))
    T = data.draw(st.integers(N, 5 * N))
    mode = data.draw(st.sampled_from(["shared", "reorder"]))
    p = plan_windows(T, N, P, mode, seed=3)
    assert p.stride == N - P
    assert p.starts[-1] + N == T
    assert np.all(p.coverage() >= 1)
    for k in range(len(p.starts) - 1):
        ov = p.actual_overlap(k)
        assert ov >= P
        assert p.noise_assignment[k + 1][:ov] == p.noise_assignment[k][-ov:]
    for a in p.noise_assignment:
        assert len(set(a)) == N  # no noise reused twice inside a window


def test_plan_invalid_geometry():
    for args in [(8, 1, 0), (8, 8, 0), (8, 8, 8), (6, 8, 4)]:
        with pytest.raises(ContractError):
            plan_windows(*args)
    with pytest.raises(ConfigError):
        plan_windows(8, 8, 4, noise_mode="bogus")


def test_independent_noise_shares_nothing():
    p = plan_windows(16, 8, 4, "independent")
    assert not set(p.noise_assignment[0]) & set(p.noise_assignment[1])


def test_noise_pool_immutable_and_deterministic():
    a, b = NoisePool(5, (2, 3, 3)), NoisePool(5, (2, 3, 3))
    x = a[7]
    assert x is a[7]
    assert torch.equal(a[7], b[7]) and not torch.equal(a[7], a[8])
    assert torch.equal(NoisePool(5, (2, 3, 3))[3], b[3])


def _windows(P=4, s=4, C=2, fill=(1.0, 0.0), t=10):
    N = s + P
    F_i = torch.full((N, C, 3, 3), fill[0])
    F_n = torch.full((N, C, 3, 3), fill[1])
    return LatentSequence(F_i, t), LatentSequence(F_n, t)


def test_fuse_ones_zeros_means():
    a, b = _windows()
    fused = fuse_overlap(a, b, plan_windows(12, 8, 4), 0)
    means = fused.mean(dim=(1, 2, 3)).double()
    assert torch.allclose(means, torch.tensor([1, 2 / 3, 1 / 3, 0], dtype=torch.float64), atol=1e-7)
    assert torch.equal(a.z[4:], fused) and torch.equal(b.z[:4], fused)


def test_fuse_endpoints_and_identity():
    g = torch.Generator().manual_seed(0)
    plan = plan_windows(12, 8, 4)
    F_i, F_n = torch.randn(8, 2, 3, 3, generator=g), torch.randn(8, 2, 3, 3, generator=g)
    fused = fuse_overlap(LatentSequence(F_i.clone(), 5), LatentSequence(F_n.clone(), 5), plan, 0)
    assert torch.equal(fused[0], F_i[4]) and torch.equal(fused[3], F_n[3])
    lo, hi = torch.minimum(F_i[4:], F_n[:4]), torch.maximum(F_i[4:], F_n[:4])
    assert torch.all(fused >= lo) and torch.all(fused <= hi)
    same = F_n.clone()
    same[:4] = F_i[4:]
    fused = fuse_overlap(LatentSequence(F_i.clone(), 5), LatentSequence(same, 5), plan, 0)
    assert torch.equal(fused, F_i[4:])


def test_fuse_timestep_mismatch():
    a, b = _windows()
    b.t = 9
    with pytest.raises(ContractError):
        fuse_overlap(a, b, plan_windows(12, 8, 4), 0)


def test_fuse_backends_agree():
    g = torch.Generator().manual_seed(1)
    plan = plan_windows(12, 8, 4)
    F_i, F_n = torch.randn(8, 4, 5, 5, generator=g), torch.randn(8, 4, 5, 5, generator=g)
    out = {}
    for be in ("python", kernels.BACKEND):
        out[be] = fuse_overlap(LatentSequence(F_i.clone(), 1), LatentSequence(F_n.clone(), 1), plan, 0, backend=be)
    assert torch.equal(out["python"], out[kernels.BACKEND])


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    model = VideoDenoiser(DenoiserConfig(base_channels=8, timesteps=100)).eval()
    # nudge the zero-init heads so outputs depend on every path
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().sum() == 0:
                p.normal_(0, 0.02)
    vae = VideoVAE(VaeConfig(variant="vae2d")).eval()
    return model, vae, build_schedule("cosine", 100)


def test_degenerate_plan_is_plain_sampling(toy):
    model, vae, sched = toy
    lr = torch.rand(8, 3, 8, 8, generator=torch.Generator().manual_seed(2))
    a = restore_video(lr, model, vae, sched, seed=4, steps=4)
    b = plain_restore(lr, model, vae, sched, seed=4, steps=4)
    assert torch.equal(a, b)


def test_restore_deterministic_and_shape(toy):
    model, vae, sched = toy
    lr = torch.rand(14, 3, 8, 8, generator=torch.Generator().manual_seed(3))
    a = restore_video(lr, model, vae, sched, seed=1, steps=3)
    b = restore_video(lr, model, vae, sched, seed=1, steps=3)
    assert a.shape == (14, 3, 32, 32) and torch.equal(a, b)


def test_restore_overlaps_agree_after_fusion(toy):
    model, vae, sched = toy
    lr = torch.rand(14, 3, 8, 8, generator=torch.Generator().manual_seed(3))
    _, lat, plan = restore_video(lr, model, vae, sched, seed=1, steps=3, return_latents=True)
    assert lat.shape == (14, 4, 8, 8)
    with pytest.raises(ContractError):
        restore_video(lr[:5], model, vae, sched)
    with pytest.raises(ConfigError):
        restore_video(lr, model, vae, sched, fusion="sometimes")
