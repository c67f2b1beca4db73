"""1D-convolutional autoencoder (encoder + decoder) and WGAN critic."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n: int = 2
    l: int = 100
    d: int = 50
    channels: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2
    critic_hidden: int = 50
    init_std: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ConfigError("channels must list exactly three stages")
        if self.d < 1 or self.n < 1 or self.l < 1:
            raise ConfigError("n, l and d must be positive")
        if self.w < 8:
            raise ConfigError(f"sequence length w={self.w} too short for three stride-2 stages")

    @property
    def w(self) -> int:
        return self.n * self.l

    def stage_lengths(self) -> list[int]:
        """Sequence length after the input and each strided convolution."""
        lengths = [self.w]
        for _ in range(3):
            nxt = (lengths[-1] + 2 * self.padding - self.kernel) // self.stride + 1
            if nxt < 1:
                raise ConfigError(f"sequence length w={self.w} collapses to zero")
            lengths.append(nxt)
        return lengths

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def _as_batch(x: torch.Tensor, w: int) -> torch.Tensor:
    if x.shape[-1] != w:
        raise ValueError(f"expected sequences of length {w}, got {tuple(x.shape)}")
    return x.reshape(-1, 1, w)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        k, s, p = cfg.kernel, cfg.stride, cfg.padding
        slope = cfg.leaky_slope
        self.features = nn.Sequential(
            nn.Conv1d(1, c1, k, s, p, bias=False), nn.BatchNorm1d(c1), nn.LeakyReLU(slope),
            nn.Conv1d(c1, c2, k, s, p, bias=False), nn.BatchNorm1d(c2), nn.LeakyReLU(slope),
            nn.Conv1d(c2, c3, k, s, p, bias=False), nn.BatchNorm1d(c3), nn.LeakyReLU(slope),
        )
        self.fc = nn.Linear(c3 * cfg.stage_lengths()[-1], cfg.d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(_as_batch(x, self.cfg.w))
        return self.fc(h.flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        k, s, p = cfg.kernel, cfg.stride, cfg.padding
        lengths = cfg.stage_lengths()
        self._start = (c3, lengths[3])

        def up(cin: int, cout: int, lin: int, lout: int) -> nn.ConvTranspose1d:
            # output_padding restores lengths lost to floor division in the encoder
            extra = lout - ((lin - 1) * s - 2 * p + k)
            return nn.ConvTranspose1d(cin, cout, k, s, p, output_padding=extra, bias=False)

        self.fc = nn.Sequential(
            nn.Linear(cfg.d, c3 * lengths[3], bias=False), nn.BatchNorm1d(c3 * lengths[3]), nn.ReLU(),
        )
        self.features = nn.Sequential(
            up(c3, c2, lengths[3], lengths[2]), nn.BatchNorm1d(c2), nn.ReLU(),
            up(c2, c1, lengths[2], lengths[1]), nn.BatchNorm1d(c1), nn.ReLU(),
            up(c1, 1, lengths[1], lengths[0]), nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(-1, *self._start)
        return self.features(h).flatten(1)


class Critic(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        k, s, p = cfg.kernel, cfg.stride, cfg.padding
        slope = cfg.leaky_slope
        _, l1, l2, l3 = cfg.stage_lengths()
        self.features = nn.Sequential(
            nn.Conv1d(1, c1, k, s, p, bias=False), nn.LayerNorm([c1, l1]), nn.LeakyReLU(slope),
            nn.Conv1d(c1, c2, k, s, p, bias=False), nn.LayerNorm([c2, l2]), nn.LeakyReLU(slope),
            nn.Conv1d(c2, c3, k, s, p, bias=False), nn.LayerNorm([c3, l3]), nn.LeakyReLU(slope),
        )
        # The two linear layers carry biases: the published critic total
        # (100,105 for n=2) exceeds its bias-free layer sum by exactly 50 + 1.
        self.head = nn.Sequential(
            nn.Linear(c3 * l3, cfg.critic_hidden), nn.LayerNorm(cfg.critic_hidden), nn.LeakyReLU(slope),
            nn.Linear(cfg.critic_hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(_as_batch(x, self.cfg.w))
        return self.head(h.flatten(1)).squeeze(-1)


def _init_params(module: nn.Module, std: float, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm1d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.zero_()


class Arcade(nn.Module):
    """Autoencoder G = D∘E plus critic C, sharing one configuration."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.critic = Critic(cfg)

    def autoencoder_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def critic_score(self, x: torch.Tensor) -> torch.Tensor:
        return self.critic(x)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Arcade:
    model = Arcade(cfg)
    gen = torch.Generator().manual_seed(seed)
    for part in (model.encoder, model.decoder, model.critic):
        _init_params(part, cfg.init_std, gen)
    return model.to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_counts(model: Arcade) -> tuple[int, int, int]:
    return count_parameters(model.encoder), count_parameters(model.decoder), count_parameters(model.critic)


def as_tensor(x: Sequence[float] | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)
