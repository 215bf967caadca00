import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentvsr.diffusion import (
    Conditioning,
    NoiseSchedule,
    build_schedule,
    diffusion_loss,
    forward_noise,
    predict_clean,
    predict_noise,
    sample,
    v_target,
)
from latentvsr.errors import ConfigError, ContractError, NumericError


def test_cosine_boundary():
    s = build_schedule("cosine", 1000)
    assert s.alpha[0] == pytest.approx(1.0, abs=1e-12)
    assert s.sigma[0] == pytest.approx(0.0, abs=1e-12)
    assert s.alpha[-1] > 0 and s.sigma[-1] < 1


def test_linear_two_steps_strictly_decreasing():
    s = build_schedule("linear", 2)
    assert s.alpha[1] < s.alpha[0]


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("n", [2, 50, 1000])
def test_variance_preserving_and_monotone(kind, n):
    s = build_schedule(kind, n)
    for t in range(n):  # scalar oracle, one step at a time
        assert abs(s.a(t) ** 2 + s.s(t) ** 2 - 1.0) <= 1e-6
    assert np.all(np.diff(s.alpha) <= 0)
    assert np.all(np.diff(s.sigma) >= 0)


def test_cosine_50_matches_closed_form():
    s = build_schedule("cosine", 50)
    for t in range(50):
        assert s.a(t) == pytest.approx(math.cos(math.pi / 2 * t / 50), abs=1e-15)


def test_schedule_errors():
    with pytest.raises(ConfigError):
        build_schedule("sqrt", 10)
    with pytest.raises(ContractError):
        build_schedule("cosine", 1)


def _const_schedule(alpha, sigma):
    return NoiseSchedule(2, np.array([alpha, alpha]), np.array([sigma, sigma]), "custom")


def test_forward_noise_identity_and_zero_signal():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(2, 3, 4, 4, generator=g)
    eps = torch.randn(2, 3, 4, 4, generator=g)
    s = build_schedule("cosine", 100)
    assert torch.equal(forward_noise(z, 0, eps, s).z, z)  # sigma_0 == 0
    out = forward_noise(torch.zeros_like(z), 40, eps, s)
    assert torch.equal(out.z, s.s(40) * eps)
    assert out.epsilon is eps


def test_forward_noise_elementwise_oracle():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    s = build_schedule("cosine", 100)
    got = forward_noise(z, 50, eps, s).z
    a, b = s.a(50), s.s(50)
    for idx in np.ndindex(*z.shape):
        assert got[idx].item() == pytest.approx(a * z[idx].item() + b * eps[idx].item(), abs=1e-12)


def test_forward_noise_shape_mismatch():
    s = build_schedule("cosine", 10)
    with pytest.raises(ContractError):
        forward_noise(torch.zeros(2, 3), 1, torch.zeros(3, 2), s)
    with pytest.raises(ContractError):
        forward_noise(torch.zeros(2), 10, torch.zeros(2), s)


def test_v_target_special_cases():
    z = torch.randn(3, 4)
    eps = torch.randn(3, 4)
    s = build_schedule("cosine", 100)
    assert torch.equal(v_target(z, torch.zeros_like(z), 30, s), -s.s(30) * z)
    assert torch.equal(v_target(z, eps, 0, s), s.a(0) * eps)


def test_v_inversion_random():
    s = build_schedule("cosine", 1000)
    g = torch.Generator().manual_seed(3)
    for _ in range(50):
        t = int(torch.randint(0, 1000, (1,), generator=g))
        z = torch.randn(4, 5, generator=g)
        eps = torch.randn(4, 5, generator=g)
        zt = forward_noise(z, t, eps, s).z
        v = v_target(z, eps, t, s)
        assert (predict_clean(zt, v, t, s) - z).abs().max() < 1e-5
        assert (predict_noise(zt, v, t, s) - eps).abs().max() < 1e-5


def test_batched_timesteps_match_scalar():
    s = build_schedule("cosine", 100)
    z = torch.randn(3, 2, 4)
    eps = torch.randn(3, 2, 4)
    t = torch.tensor([5, 50, 99])
    batched = forward_noise(z, t, eps, s).z
    for i in range(3):
        assert torch.allclose(batched[i], forward_noise(z[i], int(t[i]), eps[i], s).z)


def test_loss_cases():
    s = build_schedule("cosine", 100)
    z, eps = torch.randn(2, 3, 4), torch.randn(2, 3, 4)
    v = v_target(z, eps, 20, s)
    assert diffusion_loss(v, z, eps, 20, s).item() == 0.0
    assert diffusion_loss(v + 0.3, z, eps, 20, s).item() == pytest.approx(0.09, rel=1e-5)


def test_loss_two_pass_oracle():
    s = build_schedule("cosine", 100)
    g = torch.Generator().manual_seed(7)
    z, eps, p = (torch.randn(2, 3, 4, generator=g, dtype=torch.float64) for _ in range(3))
    vt = v_target(z, eps, 60, s)
    total = 0.0
    flat_p, flat_v = p.flatten().tolist(), vt.flatten().tolist()
    for a, b in zip(flat_p, flat_v):
        total += (a - b) ** 2
    assert diffusion_loss(p, z, eps, 60, s).item() == pytest.approx(total / len(flat_p), abs=1e-12)


def test_loss_rejects_nonfinite():
    s = build_schedule("cosine", 10)
    z = torch.zeros(3)
    with pytest.raises(NumericError):
        diffusion_loss(torch.tensor([0.0, float("nan"), 0.0]), z, z, 1, s)


def test_loss_gradient_finite_differences():
    s = build_schedule("cosine", 100)
    g = torch.Generator().manual_seed(11)
    z, eps = torch.randn(2, 3, generator=g, dtype=torch.float64), torch.randn(2, 3, generator=g, dtype=torch.float64)
    p = torch.randn(2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    diffusion_loss(p, z, eps, 42, s).backward()
    h = 1e-6
    for idx in np.ndindex(2, 3):
        up, dn = p.detach().clone(), p.detach().clone()
        up[idx] += h
        dn[idx] -= h
        fd = (diffusion_loss(up, z, eps, 42, s) - diffusion_loss(dn, z, eps, 42, s)).item() / (2 * h)
        assert p.grad[idx].item() == pytest.approx(fd, rel=1e-3)


@settings(max_examples=40, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2**16))
def test_property_joint_inversion(t, seed):
    s = build_schedule("cosine", 1000)
    g = torch.Generator().manual_seed(seed)
    z, eps = torch.randn(8, generator=g), torch.randn(8, generator=g)
    zt = forward_noise(z, t, eps, s).z
    v = v_target(z, eps, t, s)
    assert torch.allclose(predict_clean(zt, v, t, s), z, atol=1e-5)
    assert torch.allclose(predict_noise(zt, v, t, s), eps, atol=1e-5)


def _perfect_denoiser(z_clean, sched):
    def f(zt, cond, t):
        eps = (zt - sched.a(t) * z_clean) / sched.s(t) if sched.s(t) > 0 else torch.zeros_like(zt)
        return v_target(z_clean, eps, t, sched)

    return f


@pytest.mark.parametrize("steps", [1, 5, 50])
def test_perfect_denoiser_recovers_latent(steps):
    s = build_schedule("cosine", 1000)
    g = torch.Generator().manual_seed(5)
    z = torch.randn(8, 4, 16, 16, generator=g)
    cond = Conditioning(torch.zeros(8, 3, 16, 16), 0)
    out = sample(_perfect_denoiser(z, s), cond, torch.randn(8, 4, 16, 16, generator=g), s, steps)
    assert (out - z).abs().max() < 1e-4


def test_sampler_determinism_and_shape_contract():
    s = build_schedule("cosine", 100)
    cond = Conditioning(torch.zeros(2, 3, 4, 4), 0)

    def den(zt, c, t):
        return torch.tanh(zt) * 0.1

    n1 = torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
    n2 = torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
    a, b = sample(den, cond, n1, s, 10), sample(den, cond, n2, s, 10)
    assert torch.equal(a, b) and torch.isfinite(a).all()
    with pytest.raises(ContractError):
        sample(lambda zt, c, t: zt[:1], cond, n1, s, 3)
    with pytest.raises(ContractError):
        sample(den, cond, n1, s, 101)
