"""Reconstruction distances and adversarial objectives.

Sign conventions: ``l2_loss``, ``critic_loss`` and ``gradient_penalty`` are
minimized. ``mssim`` and ``generator_loss`` are similarities/objectives that
the autoencoder maximizes; the trainer negates them once, when stepping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SSIMConfig:
    c1: float = 0.01
    c2: float = 0.03
    window: int = 3
    sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if self.window < 1:
            raise ValueError("window must be positive")

    @classmethod
    def standard(cls, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0, **kw) -> "SSIMConfig":
        """Constants in the usual ``(k * L)**2`` form."""
        return cls(c1=(k1 * data_range) ** 2, c2=(k2 * data_range) ** 2, **kw)


@dataclass(frozen=True)
class AdversarialConfig:
    lambda_c: float = 10.0
    lambda_g: float = 0.01

    def __post_init__(self) -> None:
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ValueError("penalty coefficients must be non-negative")


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def l2_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Sum of squared differences over the last axis (one value per sample)."""
    _check_pair(x, x_rec)
    return ((x - x_rec) ** 2).sum(dim=-1)


def gaussian_window(size: int = 3, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_patch(p: torch.Tensor, q: torch.Tensor, cfg: SSIMConfig = SSIMConfig(),
               weights: torch.Tensor | None = None) -> torch.Tensor:
    """SSIM between two equally shaped patches using weighted moments."""
    _check_pair(p, q)
    if weights is None:
        weights = gaussian_window(p.shape[-1], cfg.sigma, p.dtype)
    mu_p = (weights * p).sum()
    mu_q = (weights * q).sum()
    var_p = (weights * p * p).sum() - mu_p ** 2
    var_q = (weights * q * q).sum() - mu_q ** 2
    cov = (weights * p * q).sum() - mu_p * mu_q
    return ((2 * mu_p * mu_q + cfg.c1) * (2 * cov + cfg.c2)
            / ((mu_p ** 2 + mu_q ** 2 + cfg.c1) * (var_p + var_q + cfg.c2)))


def _packet_images(x: torch.Tensor, n: int, l: int) -> torch.Tensor:
    side = math.isqrt(l)
    if side * side != l:
        raise ValueError(f"l={l} is not a perfect square")
    if x.shape[-1] != n * l:
        raise ValueError(f"expected length {n * l}, got {x.shape[-1]}")
    return x.reshape(-1, 1, side, side)  # (batch*n, 1, side, side), row-major per packet


def ssim_map(x: torch.Tensor, x_rec: torch.Tensor, n: int, l: int,
             cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """SSIM of every valid window, shape (batch, n, M)."""
    _check_pair(x, x_rec)
    batch = x.reshape(-1, n * l).shape[0]
    a = _packet_images(x, n, l)
    b = _packet_images(x_rec, n, l)
    win = gaussian_window(cfg.window, cfg.sigma, a.dtype).to(a.device)[None, None]
    if a.shape[-1] < cfg.window:
        raise ValueError(f"window {cfg.window} larger than packet image side {a.shape[-1]}")

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
         / ((mu_a ** 2 + mu_b ** 2 + cfg.c1) * (var_a + var_b + cfg.c2)))
    return s.reshape(batch, n, -1)


def mssim(x: torch.Tensor, x_rec: torch.Tensor, n: int, l: int,
          cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """Mean SSIM over all windows of all per-packet byte images, per sample."""
    s = ssim_map(x, x_rec, n, l, cfg).mean(dim=(1, 2))
    return s if x.dim() > 1 else s[0]


def gradient_penalty(critic, x: torch.Tensor, x_rec: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean of (||grad C(x_hat)||_2 - 1)^2 at x_hat = eps*x + (1-eps)*x_rec.

    ``eps`` holds one interpolation weight per sample. The graph is kept so
    the result can be differentiated with respect to critic parameters.
    """
    _check_pair(x, x_rec)
    x = x.reshape(-1, x.shape[-1])
    x_rec = x_rec.reshape(x.shape)
    eps = eps.reshape(-1, 1).to(x.dtype)
    x_hat = (eps * x + (1 - eps) * x_rec).detach().requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    return ((grad.norm(2, dim=1) - 1) ** 2).mean()


def critic_loss(critic, x: torch.Tensor, x_rec: torch.Tensor, lambda_c: float = 10.0,
                eps: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Critic objective to minimize: mean(C(x_rec) - C(x)) + lambda_c * GP.

    Minimizing this drives the critic to score real samples above
    reconstructions while keeping unit gradient norm on interpolates.
    """
    _check_pair(x, x_rec)
    if eps is None:
        batch = x.reshape(-1, x.shape[-1]).shape[0]
        eps = torch.rand(batch, generator=generator, dtype=x.dtype)
    x_rec = x_rec.detach()
    wasserstein = (critic(x) - critic(x_rec)).mean()
    if lambda_c == 0:
        return -wasserstein
    return -wasserstein + lambda_c * gradient_penalty(critic, x, x_rec, eps)


def generator_loss(x: torch.Tensor, x_rec: torch.Tensor, critic, n: int, l: int,
                   lambda_g: float = 0.01, ssim_cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """Autoencoder objective to maximize: mean(MSSIM(x, x_rec) + lambda_g * C(x_rec))."""
    sim = mssim(x, x_rec, n, l, ssim_cfg)
    if critic is None:
        return sim.mean()
    return (sim + lambda_g * critic(x_rec)).mean()
