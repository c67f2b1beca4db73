"""Anomaly scoring, threshold fitting, metrics, and the dataset split protocol."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .losses import l2_loss
from .model import Arcade

POLICIES = ("p99", "max")


@torch.no_grad()
def anomaly_scores(model: Arcade, values, batch_size: int = 1024) -> np.ndarray:
    """Per-sample L2 reconstruction error with normalization layers frozen."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(np.asarray(values), dtype=dtype)
        if x.dim() == 1:
            x = x[None]
        if x.shape[-1] != model.cfg.w:
            raise ValueError(f"samples have length {x.shape[-1]}, checkpoint expects {model.cfg.w}")
        out = [l2_loss(chunk, model.reconstruct(chunk)) for chunk in x.split(batch_size)]
        return torch.cat(out).double().numpy() if out else np.zeros(0)
    finally:
        model.train(was_training)


def anomaly_score(model: Arcade, x) -> float:
    return float(anomaly_scores(model, np.asarray(x)[None])[0])


def nearest_rank(scores, q: float) -> float:
    """The ceil(q*N)-th smallest value (1-based)."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    rank = max(1, math.ceil(round(q * len(s), 9)))
    return float(s[rank - 1])


def fit_threshold(normal_scores, policy: str | float = "p99") -> float:
    """Threshold from normal scores: nearest-rank 99th percentile, max, or a custom quantile."""
    s = np.asarray(normal_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot fit a threshold on zero scores")
    if policy == "max":
        return float(s.max())
    if policy == "p99":
        if s.size < 100:
            raise ValueError(f"99th percentile needs at least 100 normal scores, got {s.size}")
        return nearest_rank(s, 0.99)
    q = float(policy)
    if not 0 < q <= 1:
        raise ValueError(f"custom quantile must lie in (0, 1], got {policy!r}")
    return nearest_rank(s, q)


def auroc(scores, is_anomaly) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_anomaly, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both normal and anomalous samples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class Metrics:
    auroc: float | None
    f1: float
    accuracy: float
    precision: float
    recall: float
    dr: float
    far: float
    tp: int
    fp: int
    tn: int
    fn: int
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def evaluate(scores, labels, threshold: float) -> Metrics:
    """Threshold metrics (anomaly = positive, score > threshold) and AUROC."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels) != 0
    predicted = scores > threshold
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    tn = int(np.sum(~predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    errors = []
    try:
        auc = auroc(scores, positive)
    except ValueError as exc:
        auc = None
        errors.append(str(exc))
    return Metrics(auroc=auc, f1=f1, accuracy=_ratio(tp + tn, len(scores)), precision=precision,
                   recall=recall, dr=recall, far=_ratio(fp, fp + tn), tp=tp, fp=fp, tn=tn, fn=fn,
                   errors=errors)


@dataclass
class ScoreReport:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float
    policy: str
    metrics: Metrics
    per_class: dict[int, Metrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        labels = np.asarray(self.labels)
        return {
            "threshold": self.threshold,
            "policy": self.policy,
            "counts": {"total": int(labels.size), "normal": int(np.sum(labels == 0)),
                       "anomaly": int(np.sum(labels != 0))},
            "metrics": self.metrics.to_dict(),
            "per_class": {str(k): m.to_dict() for k, m in sorted(self.per_class.items())},
        }


def report(scores, labels, policy: str | float = "p99", fit_scores=None) -> ScoreReport:
    """Fit a threshold on normal scores and evaluate overall and per anomaly class.

    ``fit_scores`` defaults to the normal-labeled entries of ``scores``.
    Per-class metrics pair every normal sample with one anomaly class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if fit_scores is None:
        fit_scores = scores[labels == 0]
    tau = fit_threshold(fit_scores, policy)
    overall = evaluate(scores, labels, tau)
    per_class = {}
    classes = sorted(set(labels[labels != 0].tolist()))
    if len(classes) > 1:
        for c in classes:
            keep = (labels == 0) | (labels == c)
            per_class[c] = evaluate(scores[keep], labels[keep], tau)
    return ScoreReport(scores, labels, tau, str(policy), overall, per_class)


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray


def split_dataset(labels, seed: int, test_per_class: int | None = None,
                  val_fraction_pct: int = 5, balance: str = "per_class") -> Split:
    """Index split: normal-only train, class-balanced test, validation carved from test.

    ``test_per_class`` samples of every class are drawn for testing (default:
    the size of the smallest anomaly class); ``val_fraction_pct`` percent of
    each class's draw is then moved to validation. With ``balance="binary"``
    all anomaly classes are pooled and drawn as one class. Remaining normal
    samples form the training set.
    """
    labels = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    if balance not in ("per_class", "binary"):
        raise ValueError(f"unknown balance mode {balance!r}")
    groups: dict[int, np.ndarray] = {}
    for c in sorted(set(labels.tolist())):
        groups[c] = np.flatnonzero(labels == c)
    if 0 not in groups or len(groups) < 2:
        raise ValueError("split needs normal samples and at least one anomaly class")
    if balance == "binary":
        groups = {0: groups[0], 1: np.flatnonzero(labels != 0)}
    anomaly_sizes = [len(v) for c, v in groups.items() if c != 0]
    quota = min(anomaly_sizes) if test_per_class is None else int(test_per_class)
    for c, idx in groups.items():
        need = quota + (1 if c == 0 else 0)
        if len(idx) < need:
            raise ValueError(f"class {c} has {len(idx)} samples; need {need} for a test quota of {quota}")
    n_val = quota * val_fraction_pct // 100
    if n_val < 1:
        raise ValueError(f"test quota {quota} leaves an empty validation carve-out; "
                         f"use at least {math.ceil(100 / val_fraction_pct)} test samples per class")

    train, test, val = [], [], []
    for c, idx in groups.items():
        perm = rng.permutation(idx)
        drawn = perm[:quota]
        val.append(drawn[:n_val])
        test.append(drawn[n_val:])
        if c == 0:
            train.append(perm[quota:])
    return Split(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), np.sort(np.concatenate(val)))
