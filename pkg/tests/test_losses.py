import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arcade.losses import (
    AdversarialConfig,
    SSIMConfig,
    critic_loss,
    gaussian_window,
    generator_loss,
    gradient_penalty,
    l2_loss,
    mssim,
    ssim_map,
    ssim_patch,
)
from arcade.model import ModelConfig, build_model
from oracles import brute_mssim, finite_difference_check, gaussian_weights, ssim_window

byte_fractions = st.integers(0, 255).map(lambda k: k / 255)
unit = arrays(np.float64, 100, elements=byte_fractions)


def linear_critic(weights):
    lin = torch.nn.Linear(len(weights), 1, bias=False).double()
    with torch.no_grad():
        lin.weight.copy_(torch.tensor([weights], dtype=torch.float64))
    return lambda v: lin(v).squeeze(-1)


def test_l2_examples():
    x = torch.tensor([0.0, 0.0])
    y = torch.tensor([1.0, 1.0])
    assert l2_loss(x, x).item() == 0.0
    assert l2_loss(x, y).item() == 2.0
    assert l2_loss(y, x).item() == 2.0


def test_l2_shape_mismatch():
    with pytest.raises(ValueError):
        l2_loss(torch.zeros(3), torch.zeros(4))


@given(unit, unit)
def test_l2_properties(a, b):
    x, y = torch.from_numpy(a), torch.from_numpy(b)
    v = l2_loss(x, y).item()
    assert v >= 0
    assert v == l2_loss(y, x).item()
    assert (v == 0) == bool(np.array_equal(a, b))


def test_window_matches_reference():
    assert np.allclose(gaussian_window(3, 1.5).numpy(), gaussian_weights(3, 1.5), atol=1e-15)


def test_ssim_patch_examples():
    p = torch.rand(3, 3, dtype=torch.float64)
    assert ssim_patch(p, p).item() == pytest.approx(1.0, abs=1e-12)
    zeros, ones = torch.zeros(3, 3, dtype=torch.float64), torch.ones(3, 3, dtype=torch.float64)
    assert ssim_patch(zeros, ones).item() == pytest.approx(0.01 / 1.01, abs=1e-12)


@settings(max_examples=200)
@given(arrays(np.float64, (3, 3), elements=byte_fractions), arrays(np.float64, (3, 3), elements=byte_fractions))
def test_ssim_patch_matches_centered_moments_and_is_bounded(p, q):
    v = ssim_patch(torch.from_numpy(p), torch.from_numpy(q)).item()
    assert v == pytest.approx(ssim_window(p, q, gaussian_weights()), abs=1e-9)
    assert -1 - 1e-9 <= v <= 1 + 1e-9


def test_mssim_examples():
    x = torch.rand(200, dtype=torch.float64)
    assert mssim(x, x, 2, 100).item() == pytest.approx(1.0, abs=1e-12)
    assert mssim(torch.zeros(100, dtype=torch.float64), torch.ones(100, dtype=torch.float64), 1, 100).item() == pytest.approx(
        0.01 / 1.01, rel=1e-12)


def test_window_count():
    assert ssim_map(torch.rand(3, 200), torch.rand(3, 200), 2, 100).shape == (3, 2, 64)


def test_l_must_be_square():
    with pytest.raises(ValueError):
        mssim(torch.rand(90), torch.rand(90), 1, 90)


def test_standard_constants():
    cfg = SSIMConfig.standard()
    assert cfg.c1 == pytest.approx(1e-4) and cfg.c2 == pytest.approx(9e-4)
    x, y = np.random.default_rng(0).random((2, 100))
    got = mssim(torch.from_numpy(x), torch.from_numpy(y), 1, 100, cfg).item()
    assert got == pytest.approx(brute_mssim(x, y, 1, 100, c1=1e-4, c2=9e-4), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 200, elements=byte_fractions), arrays(np.float64, 200, elements=byte_fractions))
def test_mssim_symmetric_and_matches_brute_force(a, b):
    x, y = torch.from_numpy(a), torch.from_numpy(b)
    v = mssim(x, y, 2, 100).item()
    assert v == pytest.approx(mssim(y, x, 2, 100).item(), abs=1e-12)
    assert v == pytest.approx(brute_mssim(a, b, 2, 100), abs=1e-9)
    assert mssim(x, x, 2, 100).item() == pytest.approx(1.0, abs=1e-9)


def test_mssim_batch_is_per_sample():
    x, y = torch.rand(4, 200, dtype=torch.float64), torch.rand(4, 200, dtype=torch.float64)
    batch = mssim(x, y, 2, 100)
    assert batch.shape == (4,)
    assert torch.allclose(batch, torch.stack([mssim(x[i], y[i], 2, 100) for i in range(4)]))


def test_gradient_penalty_linear_critics():
    x = torch.rand(5, 2, dtype=torch.float64)
    y = torch.rand(5, 2, dtype=torch.float64)
    eps = torch.rand(5, dtype=torch.float64)
    assert gradient_penalty(linear_critic([0.6, 0.8]), x, y, eps).item() == pytest.approx(0.0, abs=1e-12)
    assert gradient_penalty(linear_critic([3.0, 4.0]), x, y, eps).item() == pytest.approx(16.0, abs=1e-9)


def test_gradient_penalty_uses_one_eps_per_sample():
    seen = []

    def critic(v):
        seen.append(v.detach().clone())
        return v.sum(-1)

    x = torch.zeros(3, 2, dtype=torch.float64)
    y = torch.ones(3, 2, dtype=torch.float64)
    gradient_penalty(critic, x, y, torch.tensor([1.0, 0.0, 0.25], dtype=torch.float64))
    assert torch.equal(seen[0], torch.tensor([[0.0, 0.0], [1.0, 1.0], [0.75, 0.75]], dtype=torch.float64))


def test_gradient_penalty_zero_only_for_unit_norm():
    x = torch.rand(4, 3, dtype=torch.float64)
    eps = torch.rand(4, dtype=torch.float64)
    quad = lambda v: (v ** 2).sum(-1)  # noqa: E731  gradient norm 2||v|| varies per point
    assert gradient_penalty(quad, x, x * 0.5, eps).item() > 0


def test_critic_loss_examples():
    x = torch.rand(6, 2, dtype=torch.float64)
    unit_critic = linear_critic([0.6, 0.8])
    assert critic_loss(unit_critic, x, x, lambda_c=10).item() == pytest.approx(0.0, abs=1e-12)

    y = torch.rand(6, 2, dtype=torch.float64)
    c = linear_critic([1.0, -2.0])
    # the minimized loss is the negated Wasserstein estimate when the penalty is off
    expected = -(c(x).mean() - c(y).mean()).item()
    assert critic_loss(c, x, y, lambda_c=0).item() == pytest.approx(expected, abs=1e-12)


def test_zero_critic_loss_is_lambda():
    m = build_model(ModelConfig(), seed=0)
    with torch.no_grad():
        for p in m.critic.parameters():
            p.zero_()
    x, y = torch.rand(4, 200), torch.rand(4, 200)
    assert critic_loss(m.critic, x, y, lambda_c=10).item() == pytest.approx(10.0, abs=1e-5)


def test_generator_loss_examples():
    m = build_model(ModelConfig(), seed=0)
    with torch.no_grad():
        for p in m.critic.parameters():
            p.zero_()
    x = torch.rand(3, 200)
    assert generator_loss(x, x, m.critic, 2, 100).item() == pytest.approx(1.0, abs=1e-5)
    y = torch.rand(3, 200)
    assert generator_loss(x, y, m.critic, 2, 100, lambda_g=0).item() == pytest.approx(mssim(x, y, 2, 100).mean().item())


def test_generator_loss_linear_in_critic_score():
    x, y = torch.rand(4, 16, dtype=torch.float64), torch.rand(4, 16, dtype=torch.float64)
    base = generator_loss(x, y, lambda v: torch.zeros(v.shape[0], dtype=v.dtype), 1, 16, 0.01).item()
    shifted = generator_loss(x, y, lambda v: torch.full((v.shape[0],), 3.0, dtype=v.dtype), 1, 16, 0.01).item()
    assert shifted - base == pytest.approx(0.03, abs=1e-12)


def test_adversarial_config_validation():
    assert AdversarialConfig().lambda_c == 10 and AdversarialConfig().lambda_g == 0.01
    with pytest.raises(ValueError):
        AdversarialConfig(lambda_g=-1)


def _tiny():
    cfg = ModelConfig(n=1, l=16, d=2, channels=(2, 2, 2), critic_hidden=2)
    return build_model(cfg, seed=5, dtype=torch.float64).train()


def test_generator_gradients_match_finite_differences():
    m = _tiny()
    x = torch.rand(4, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    params = m.autoencoder_parameters()
    err, count = finite_difference_check(
        lambda: generator_loss(x, m.reconstruct(x), m.critic, 1, 16, lambda_g=0.5), params)
    assert count > 0 and err < 1e-3


def test_critic_gradients_match_finite_differences():
    m = _tiny()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(4, 16, dtype=torch.float64, generator=g)
    y = torch.rand(4, 16, dtype=torch.float64, generator=g)
    eps = torch.rand(4, dtype=torch.float64, generator=g)
    err, _ = finite_difference_check(lambda: critic_loss(m.critic, x, y, 10.0, eps), list(m.critic.parameters()))
    assert err < 1e-3
