"""Experiment orchestration: data -> train -> score -> evaluate over sweeps.

An experiment file (YAML or JSON) names the data source, model/train/detect
settings and two optional sweep axes (``lambda_g`` and ``n``). Each sweep
point runs once per seed; results land in a directory derived from the hash
of the validated spec.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .arcd import SampleSet
from .detector import anomaly_scores, auroc, report, split_dataset
from .ingest import IngestConfig, preprocess_capture
from .model import ModelConfig, build_model
from .synth import SynthConfig, synth_generate
from .trainer import TrainConfig, Trainer, latent_dim_from_pca, save_checkpoint, write_loss_csv

log = logging.getLogger(__name__)

# Ten-fold two-phase learning rates: a desk-scale corpus gives far fewer
# optimizer steps per epoch than full captures do.
DESK_TRAIN = {"epochs_phase1": 10, "epochs_phase2": 5, "lr_phase1": 1e-3, "lr_phase2": 1e-4}

DEFAULTS = {
    "name": "arcade",
    "seeds": [1],
    "data": {
        "source": "synth",
        "train_normal": 2000,
        "test_per_class": 400,
        "balance": "binary",
        "synth": {},
    },
    "model": {"d": 50},
    "train": dict(DESK_TRAIN),
    "detect": {"policy": "p99"},
    "sweep": {"lambda_g": [], "n": []},
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} - {"seed", "n", "n_normal_flows", "n_anomaly_flows"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "seeds", "data"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["synth", "pcap"]},
                "train_normal": {"type": "integer", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 20},
                "balance": {"enum": ["binary", "per_class"]},
                "synth": {"type": "object", "propertyNames": {"enum": sorted(_SYNTH_KEYS)}},
                "captures": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["path", "label"],
                        "properties": {"path": {"type": "string"},
                                       "label": {"type": "integer", "minimum": 0, "maximum": 255}},
                    },
                },
                "ingest": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"timeout_s": {"type": "number", "exclusiveMinimum": 0},
                                   "mode": {"enum": ["flow", "session"]},
                                   "pad_incomplete": {"type": "boolean"}},
                },
            },
        },
        "model": {
            "type": "object",
            "properties": {"d": {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]}},
        },
        "train": {"type": "object", "propertyNames": {"enum": sorted(_TRAIN_KEYS)}},
        "detect": {"type": "object", "properties": {"policy": {"anyOf": [{"enum": ["p99", "max"]},
                                                                          {"type": "number"}]}}},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_g": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "n": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_spec(source: str | os.PathLike | dict) -> dict:
    """Read, validate and fill defaults for an experiment spec."""
    if isinstance(source, dict):
        raw = source
    else:
        with open(source) as fh:
            raw = yaml.safe_load(fh) or {}
    jsonschema.validate(raw, SCHEMA)
    spec = _merge(DEFAULTS, raw)
    jsonschema.validate(spec, SCHEMA)
    if spec["data"]["source"] == "pcap" and not spec["data"].get("captures"):
        raise jsonschema.ValidationError("pcap source needs a non-empty 'captures' list")
    return spec


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


def _test_draw(final_test: int, val_pct: int = 5) -> int:
    """Smallest per-class draw that leaves ``final_test`` after the validation carve-out."""
    q = final_test
    while q - q * val_pct // 100 < final_test:
        q += 1
    return q


def load_dataset(spec: dict, n: int, seed: int) -> SampleSet:
    data = spec["data"]
    if data["source"] == "synth":
        quota = _test_draw(data["test_per_class"])
        extra = dict(data.get("synth", {}))
        if "normal_templates" in extra:
            extra["normal_templates"] = tuple(extra["normal_templates"])
        cfg = SynthConfig(seed=seed, n=n, n_normal_flows=data["train_normal"] + quota,
                          n_anomaly_flows=quota, **extra)
        return synth_generate(cfg)
    ingest = IngestConfig(n=n, **data.get("ingest", {}))
    parts = [preprocess_capture(c["path"], ingest, label=c["label"])[0] for c in data["captures"]]
    values = np.concatenate([p.values for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return SampleSet(values, n, ingest.l, labels)


@dataclass
class PointResult:
    n: int
    lambda_g: float
    seed: int
    status: str
    auroc: float | None = None
    f1: float | None = None
    dr: float | None = None
    far: float | None = None
    threshold: float | None = None
    curve: list[float] | None = None


def _point_dir(root: Path, n: int, lambda_g: float, seed: int) -> Path:
    return root / "points" / f"n{n}_lg{lambda_g:g}_seed{seed}"


def run_point(spec: dict, n: int, lambda_g: float, seed: int, out: Path) -> PointResult:
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(spec, n, seed)
    split = split_dataset(samples.labels, seed, test_per_class=_test_draw(spec["data"]["test_per_class"]),
                          balance=spec["data"]["balance"])
    train_set = samples.subset(split.train)
    val_set = samples.subset(split.validation)
    test_set = samples.subset(split.test)

    d = spec["model"]["d"]
    if d == "auto":
        d = latent_dim_from_pca(train_set.values)
    model = build_model(ModelConfig(n=n, l=samples.l, d=int(d)), seed)
    train_kw = {k: v for k, v in spec["train"].items()}
    train_kw["lambda_g"] = lambda_g
    cfg = TrainConfig(seed=seed, **train_kw)

    curve: list[float] = []

    def track(trainer: Trainer, stats) -> None:
        scores = anomaly_scores(trainer.model, val_set.values)
        curve.append(auroc(scores, val_set.labels != 0))

    trainer = Trainer(model, cfg, train_set)
    history = trainer.run(callback=track)
    model.eval()

    save_checkpoint(out / "ckpt.pt", model, seed, {"n": n, "lambda_g": lambda_g, "train": train_kw})
    write_loss_csv(out / "losses.csv", history)
    scores = anomaly_scores(model, test_set.values)
    write_scores_csv(out / "scores.csv", scores, test_set.labels)
    rep = report(scores, test_set.labels, spec["detect"]["policy"])
    payload = rep.to_dict()
    payload["val_auroc_by_epoch"] = curve
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    m = rep.metrics
    return PointResult(n, lambda_g, seed, "ok", m.auroc, m.f1, m.dr, m.far, rep.threshold, curve)


def write_scores_csv(path, scores, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "score", "label"])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s)), "" if labels is None else int(labels[i])])


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    scores, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(row.get("label", ""))
    has_labels = all(lbl not in ("", None) for lbl in labels) and labels
    return np.asarray(scores), (np.asarray([int(x) for x in labels]) if has_labels else None)


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(results: list[PointResult]) -> list[dict]:
    rows = []
    keys = sorted({(r.n, r.lambda_g) for r in results})
    for n, lg in keys:
        ok = [r for r in results if (r.n, r.lambda_g) == (n, lg) and r.status == "ok"]
        row = {"n": n, "lambda_g": lg, "seeds_ok": len(ok),
               "seeds_failed": sum(1 for r in results if (r.n, r.lambda_g) == (n, lg) and r.status != "ok")}
        if ok:
            row["auroc_mean"], row["auroc_std"] = _mean_std([r.auroc for r in ok])
            row["f1_mean"], row["f1_std"] = _mean_std([r.f1 for r in ok])
        rows.append(row)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    names = []
    for r in rows:
        names += [k for k in r if k not in names]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _plots(root: Path, results: list[PointResult], summary: list[dict]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for n, lg in sorted({(r.n, r.lambda_g) for r in results}):
        curves = [r.curve for r in results if (r.n, r.lambda_g) == (n, lg) and r.status == "ok" and r.curve]
        if not curves:
            continue
        arr = np.asarray(curves) * 100
        epochs = np.arange(1, arr.shape[1] + 1)
        ax.errorbar(epochs, arr.mean(0), yerr=arr.std(0), label=f"n={n}, λG={lg:g}", capsize=2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation AUROC (%)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(root / "auroc_vs_epoch.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for lg in sorted({row["lambda_g"] for row in summary}):
        rows = [r for r in summary if r["lambda_g"] == lg and "auroc_mean" in r]
        if rows:
            ax.errorbar([r["n"] for r in rows], [100 * r["auroc_mean"] for r in rows],
                        yerr=[100 * r["auroc_std"] for r in rows], marker="o", label=f"λG={lg:g}", capsize=2)
    ax.set_xlabel("packets per sample (n)")
    ax.set_ylabel("test AUROC (%)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(root / "auroc_vs_n.png", dpi=120)
    plt.close(fig)


def run_experiment(spec_source, out_dir: str | os.PathLike, plots: bool = True) -> Path:
    """Run every sweep point for every seed; return the report directory.

    A failing point is recorded in ``points.csv`` and the others proceed.
    """
    spec = load_spec(spec_source)
    root = Path(out_dir) / f"{spec['name']}-{spec_hash(spec)[:12]}"
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "spec.json", "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)

    lambdas = spec["sweep"].get("lambda_g") or [spec["train"].get("lambda_g", TrainConfig.lambda_g)]
    ns = spec["sweep"].get("n") or [2]
    results: list[PointResult] = []
    for n in ns:
        for lg in lambdas:
            for seed in spec["seeds"]:
                log.info("point n=%d lambda_g=%g seed=%d", n, lg, seed)
                try:
                    results.append(run_point(spec, n, float(lg), seed, _point_dir(root, n, float(lg), seed)))
                except Exception as exc:  # a failed point must not stop the sweep
                    log.error("point n=%d lambda_g=%g seed=%d failed: %s", n, lg, seed, exc)
                    log.debug("%s", traceback.format_exc())
                    results.append(PointResult(n, float(lg), seed, f"failed: {exc}"))

    point_rows = [{"n": r.n, "lambda_g": r.lambda_g, "seed": r.seed, "status": r.status, "auroc": r.auroc,
                   "f1": r.f1, "dr": r.dr, "far": r.far, "threshold": r.threshold} for r in results]
    _write_rows(root / "points.csv", point_rows)
    summary = summarize(results)
    _write_rows(root / "summary.csv", summary)
    curve_rows = []
    for r in results:
        for epoch, value in enumerate(r.curve or []):
            curve_rows.append({"n": r.n, "lambda_g": r.lambda_g, "seed": r.seed, "epoch": epoch, "val_auroc": value})
    _write_rows(root / "auroc_by_epoch.csv", curve_rows)
    if plots:
        _plots(root, results, summary)
    return root


def experiment_failed(root: Path) -> bool:
    with open(root / "points.csv", newline="") as fh:
        return any(row["status"] != "ok" for row in csv.DictReader(fh))
