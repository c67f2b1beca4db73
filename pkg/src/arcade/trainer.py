"""Adversarially regularized autoencoder training.

Per batch: reconstruct, take one Adam step on the critic, then one Adam step
on the autoencoder against the freshly updated critic. Learning rate follows
a two-phase schedule (search, then fine-tune).
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .arcd import SampleSet
from .losses import SSIMConfig, critic_loss, generator_loss, l2_loss, mssim
from .model import Arcade, ModelConfig, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lambda_c: float = 10.0
    lambda_g: float = 0.01
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    beta1: float = 0.0
    beta2: float = 0.9
    epochs_phase1: int = 100
    epochs_phase2: int = 50
    max_epochs: int | None = None
    seed: int = 0
    shuffle: bool = True
    drop_last: bool = True
    adversarial: bool = True
    loss: str = "mssim"  # "mssim" (ARCADE / AE-SSIM) or "l2" (AE-L2)
    ssim_c1: float = 0.01
    ssim_c2: float = 0.03
    ssim_window: int = 3
    ssim_sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if min(self.lambda_c, self.lambda_g, self.lr_phase1, self.lr_phase2) < 0:
            raise ValueError("coefficients and learning rates must be non-negative")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.loss not in ("mssim", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def total_epochs(self) -> int:
        if self.max_epochs is not None:
            return self.max_epochs
        return self.epochs_phase1 + self.epochs_phase2

    @property
    def ssim(self) -> SSIMConfig:
        return SSIMConfig(self.ssim_c1, self.ssim_c2, self.ssim_window, self.ssim_sigma)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0 or epoch >= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {cfg.total_epochs} epochs")
    return cfg.lr_phase1 if epoch < cfg.epochs_phase1 else cfg.lr_phase2


def latent_dim_from_pca(samples: np.ndarray, variance: float = 0.95) -> int:
    """Fewest principal components whose explained variance reaches ``variance``."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two samples to estimate principal components")
    X = X - X.mean(axis=0)
    sv = np.linalg.svd(X, compute_uv=False)
    eig = sv ** 2
    total = eig.sum()
    if total == 0:
        return 1
    ratio = np.cumsum(eig) / total
    # small slack so exactly-on-threshold spectra are not lost to rounding
    return int(np.searchsorted(ratio, variance - 1e-12) + 1)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    critic_loss: float
    generator_loss: float
    mssim: float

    def as_row(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, "L_C": self.critic_loss,
                "L_G": self.generator_loss, "MSSIM": self.mssim}


def _normal_only(data) -> torch.Tensor:
    if isinstance(data, SampleSet):
        if data.labels is not None and np.any(data.labels != 0):
            raise ValueError("training set contains anomaly-labeled samples; train on normal traffic only")
        values = data.values
    else:
        values = data
    return torch.as_tensor(np.asarray(values, dtype=np.float32))


@dataclass
class Trainer:
    model: Arcade
    cfg: TrainConfig
    data: torch.Tensor
    epoch: int = 0
    critic_steps: int = 0
    ae_steps: int = 0
    history: list[EpochStats] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.data = _normal_only(self.data).to(next(self.model.parameters()).dtype)
        if self.data.shape[-1] != self.model.cfg.w:
            raise ValueError(f"samples have length {self.data.shape[-1]}, model expects {self.model.cfg.w}")
        if self.cfg.drop_last and len(self.data) < self.cfg.batch_size:
            raise ValueError(f"need at least {self.cfg.batch_size} samples for one full batch")
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.critic_opt = torch.optim.Adam(self.model.critic.parameters(), lr=self.cfg.lr_phase1, betas=betas)
        self.ae_opt = torch.optim.Adam(self.model.autoencoder_parameters(), lr=self.cfg.lr_phase1, betas=betas)
        # separate streams: batch order must not depend on whether the critic samples eps
        self.shuffle_gen = torch.Generator().manual_seed(self.cfg.seed)
        self.eps_gen = torch.Generator().manual_seed(self.cfg.seed + 1)

    def batches(self) -> list[torch.Tensor]:
        m = self.cfg.batch_size
        count = len(self.data)
        order = torch.randperm(count, generator=self.shuffle_gen) if self.cfg.shuffle else torch.arange(count)
        stop = count - count % m if self.cfg.drop_last else count
        return [order[i:i + m] for i in range(0, stop, m) if len(order[i:i + m]) >= 2]

    def _objective(self, x: torch.Tensor, x_rec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(objective to maximize, batch MSSIM)."""
        n, l = self.model.cfg.n, self.model.cfg.l
        critic = self.model.critic if self.cfg.adversarial else None
        if self.cfg.loss == "mssim":
            obj = generator_loss(x, x_rec, critic, n, l, self.cfg.lambda_g, self.cfg.ssim)
            with torch.no_grad():
                sim = mssim(x, x_rec, n, l, self.cfg.ssim).mean()
            return obj, sim
        obj = -l2_loss(x, x_rec)
        if critic is not None:
            obj = obj + self.cfg.lambda_g * critic(x_rec)
        with torch.no_grad():
            sim = mssim(x, x_rec, n, l, self.cfg.ssim).mean()
        return obj.mean(), sim

    def train_step(self, x: torch.Tensor) -> tuple[float, float, float]:
        model = self.model
        model.train()
        x_rec = model.reconstruct(x)

        lc_value = float("nan")
        if self.cfg.adversarial:
            eps = torch.rand(x.shape[0], generator=self.eps_gen, dtype=x.dtype)
            lc = critic_loss(model.critic, x, x_rec.detach(), self.cfg.lambda_c, eps)
            self.critic_opt.zero_grad(set_to_none=True)
            lc.backward()
            self.critic_opt.step()
            self.critic_steps += 1
            lc_value = lc.item()

        critic_params = list(model.critic.parameters())
        for p in critic_params:
            p.requires_grad_(False)
        try:
            lg, sim = self._objective(x, x_rec)
            self.ae_opt.zero_grad(set_to_none=True)
            (-lg).backward()
            self.ae_opt.step()
            self.ae_steps += 1
        finally:
            for p in critic_params:
                p.requires_grad_(True)

        lg_value = lg.item()
        if not math.isfinite(lg_value) or (self.cfg.adversarial and not math.isfinite(lc_value)):
            raise TrainingDiverged(
                f"non-finite loss at epoch {self.epoch}, step {self.ae_steps}: L_C={lc_value}, L_G={lg_value}")
        return lc_value, lg_value, sim.item()

    def train_epoch(self) -> EpochStats:
        lr = lr_schedule(self.epoch, self.cfg)
        for opt in (self.critic_opt, self.ae_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        totals = np.zeros(3)
        batches = self.batches()
        for idx in batches:
            totals += self.train_step(self.data[idx])
        means = totals / max(len(batches), 1)
        stats = EpochStats(self.epoch, lr, float(means[0]), float(means[1]), float(means[2]))
        self.history.append(stats)
        self.epoch += 1
        log.info("epoch %d lr=%g L_C=%.5f L_G=%.5f MSSIM=%.5f", stats.epoch, lr,
                 stats.critic_loss, stats.generator_loss, stats.mssim)
        return stats

    def run(self, epochs: int | None = None,
            callback: Callable[["Trainer", EpochStats], None] | None = None) -> list[EpochStats]:
        end = self.cfg.total_epochs if epochs is None else min(self.epoch + epochs, self.cfg.total_epochs)
        while self.epoch < end:
            stats = self.train_epoch()
            if callback is not None:
                callback(self, stats)
        return self.history

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "ae_opt": self.ae_opt.state_dict(),
            "epoch": self.epoch,
            "critic_steps": self.critic_steps,
            "ae_steps": self.ae_steps,
            "history": [asdict(h) for h in self.history],
            "shuffle_gen": self.shuffle_gen.get_state(),
            "eps_gen": self.eps_gen.get_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.ae_opt.load_state_dict(state["ae_opt"])
        self.epoch = state["epoch"]
        self.critic_steps = state["critic_steps"]
        self.ae_steps = state["ae_steps"]
        self.history = [EpochStats(**h) for h in state["history"]]
        self.shuffle_gen.set_state(state["shuffle_gen"])
        self.eps_gen.set_state(state["eps_gen"])


def train(data, model: Arcade, cfg: TrainConfig,
          callback: Callable[[Trainer, EpochStats], None] | None = None) -> tuple[Arcade, list[EpochStats]]:
    """Train ``model`` in place on normal samples; return it with per-epoch losses."""
    trainer = Trainer(model, cfg, data)
    history = trainer.run(callback=callback)
    model.eval()
    return model, history


def write_loss_csv(path: str | os.PathLike, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "L_C", "L_G", "MSSIM"])
        writer.writeheader()
        for h in history:
            writer.writerow(h.as_row())


def save_checkpoint(path: str | os.PathLike, model: Arcade, seed: int, metadata: dict | None = None,
                    trainer_state: dict | None = None) -> None:
    payload = {
        "model_config": model.cfg.to_json(),
        "state_dict": model.state_dict(),
        "seed": seed,
        "metadata": metadata or {},
    }
    if trainer_state is not None:
        payload["trainer_state"] = trainer_state
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[Arcade, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = ModelConfig.from_json(payload["model_config"])
    dtype = next(iter(payload["state_dict"].values())).dtype
    model = build_model(cfg, payload["seed"], dtype=dtype if dtype.is_floating_point else torch.float32)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
