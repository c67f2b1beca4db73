"""Detection-speed benchmark: flows scored per second at several batch sizes."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .losses import l2_loss
from .model import Arcade


@dataclass
class BenchRow:
    batch_size: int
    mean_flows_per_s: float
    std_flows_per_s: float
    runs: int


@torch.no_grad()
def time_scoring(model: Arcade, x: torch.Tensor, batch_size: int) -> float:
    """Seconds to score every row of ``x`` (reconstruction + L2), batch by batch."""
    start = time.perf_counter()
    for chunk in x.split(batch_size):
        l2_loss(chunk, model.reconstruct(chunk))
    return time.perf_counter() - start


def bench_throughput(model: Arcade, values, batch_sizes=(1, 64, 1024), runs: int = 10,
                     warmup_s: float = 5.0) -> list[BenchRow]:
    """Mean and std of flows/s over ``runs`` timed passes per batch size.

    Each batch size is preceded by ``warmup_s`` seconds of untimed scoring.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(values), dtype=dtype)
    if x.shape[-1] != model.cfg.w:
        raise ValueError(f"samples have length {x.shape[-1]}, checkpoint expects {model.cfg.w}")
    rows = []
    for bs in batch_sizes:
        deadline = time.perf_counter() + warmup_s
        while time.perf_counter() < deadline:
            time_scoring(model, x[: max(bs, 1)], bs)
        rates = np.array([len(x) / time_scoring(model, x, bs) for _ in range(runs)])
        rows.append(BenchRow(int(bs), float(rates.mean()), float(rates.std()), runs))
    return rows
