"""Command line entry point: ``arcade <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("arcade")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _parse_epochs(text: str) -> tuple[int, int]:
    parts = text.split("+")
    if len(parts) == 1:
        return int(parts[0]), 0
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise argparse.ArgumentTypeError(f"epochs must look like 100+50, got {text!r}")


def _parse_lr(text: str) -> tuple[float, float]:
    parts = text.split("+")
    if len(parts) == 1:
        return float(parts[0]), float(parts[0])
    return float(parts[0]), float(parts[1])


def cmd_preprocess(args) -> int:
    from .arcd import write_arcd
    from .ingest import IngestConfig, preprocess_capture

    cfg = IngestConfig(n=args.n, l=args.l, timeout_s=args.timeout, mode=args.mode,
                       pad_incomplete=args.pad_incomplete)
    samples, reader = preprocess_capture(args.input, cfg, label=args.label)
    write_arcd(args.out, samples)
    print(f"{len(samples)} samples from {reader.packets} IP packets "
          f"(skipped {reader.skipped} non-IP, rejected {reader.rejected}{', truncated' if reader.truncated else ''})")
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_generate

    overrides = _load_config(args.config)
    if "normal_templates" in overrides:
        overrides["normal_templates"] = tuple(overrides["normal_templates"])
    fields = {"seed": args.seed, "n": args.n}
    if args.normal is not None:
        fields["n_normal_flows"] = args.normal
    if args.anomaly is not None:
        fields["n_anomaly_flows"] = args.anomaly
    cfg = SynthConfig(**{**overrides, **fields})
    samples = synth_generate(cfg, out=args.out, pcap_out=args.pcap_out)
    counts = np.bincount(samples.labels, minlength=3)
    print(f"wrote {len(samples)} samples to {args.out} (label counts {counts.tolist()})")
    return 0


def cmd_train(args) -> int:
    from .arcd import read_arcd
    from .model import ModelConfig, build_model
    from .trainer import TrainConfig, Trainer, latent_dim_from_pca, save_checkpoint, write_loss_csv

    data = read_arcd(args.data)
    if args.n is not None and args.n != data.n:
        raise SystemExit(f"--n {args.n} does not match data file (n={data.n})")
    if data.labels is not None:
        data = data.subset(np.flatnonzero(data.labels == 0)) if args.normal_only else data
    overrides = _load_config(args.config)
    p1, p2 = _parse_epochs(args.epochs)
    lr1, lr2 = _parse_lr(args.lr) if args.lr else (overrides.pop("lr_phase1", 1e-4), overrides.pop("lr_phase2", 1e-5))
    cfg_fields = {**overrides, "seed": args.seed, "lambda_g": args.lambda_g, "epochs_phase1": p1,
                  "epochs_phase2": p2, "lr_phase1": lr1, "lr_phase2": lr2, "loss": args.loss,
                  "adversarial": not args.no_adversarial}
    if args.batch_size:
        cfg_fields["batch_size"] = args.batch_size
    cfg = TrainConfig(**cfg_fields)
    d = latent_dim_from_pca(data.values) if args.d == "auto" else int(args.d)
    log.info("latent size d=%d", d)
    model = build_model(ModelConfig(n=data.n, l=data.l, d=d), args.seed)
    trainer = Trainer(model, cfg, data)
    history = trainer.run()
    model.eval()
    save_checkpoint(args.out, model, args.seed, {"train": asdict(cfg)})
    losses = Path(args.losses) if args.losses else Path(args.out).with_name("losses.csv")
    write_loss_csv(losses, history)
    print(f"trained {len(history)} epochs; checkpoint {args.out}, losses {losses}")
    return 0


def cmd_score(args) -> int:
    from .arcd import read_arcd
    from .detector import anomaly_scores
    from .experiment import write_scores_csv
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    data = read_arcd(args.data)
    scores = anomaly_scores(model, data.values, batch_size=args.batch_size)
    write_scores_csv(args.out, scores, data.labels)
    print(f"scored {len(scores)} samples -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .detector import report
    from .experiment import read_scores_csv

    scores, labels = read_scores_csv(args.scores)
    if labels is None:
        raise SystemExit("scores file carries no labels; cannot evaluate")
    fit = None
    if args.fit_scores:
        fit_scores, fit_labels = read_scores_csv(args.fit_scores)
        fit = fit_scores if fit_labels is None else fit_scores[fit_labels == 0]
    policy = args.policy if args.policy in ("p99", "max") else float(args.policy)
    rep = report(scores, labels, policy, fit_scores=fit)
    payload = rep.to_dict()
    with open(args.report, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    m = rep.metrics
    auc = "n/a" if m.auroc is None else f"{m.auroc:.4f}"
    print(f"threshold={rep.threshold:.6g} AUROC={auc} F1={m.f1:.4f} DR={m.dr:.4f} FAR={m.far:.4f}")
    return 1 if m.errors else 0


def cmd_experiment(args) -> int:
    from .experiment import experiment_failed, run_experiment

    if not args.config:
        raise SystemExit("experiment needs --config <spec.yaml>")
    root = run_experiment(args.config, args.out, plots=not args.no_plots)
    print(f"report written to {root}")
    return 1 if experiment_failed(root) else 0


def cmd_bench(args) -> int:
    from .arcd import read_arcd
    from .bench import bench_throughput
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    data = read_arcd(args.data)
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    rows = bench_throughput(model, data.values, sizes, runs=args.runs, warmup_s=args.warmup)
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out)
        w.writerow(["batch_size", "mean_flows_per_s", "std_flows_per_s", "runs"])
        for r in rows:
            w.writerow([r.batch_size, f"{r.mean_flows_per_s:.1f}", f"{r.std_flows_per_s:.1f}", r.runs])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="YAML file with extra settings for this stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="arcade", description="Raw-byte flow anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="pcap/pcapng -> ARCD samples")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--mode", choices=["flow", "session"], default="flow")
    p.add_argument("--pad-incomplete", action="store_true")
    p.add_argument("--label", type=int, help="label every sample with this class id (0 = normal)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="generate labeled synthetic samples")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--normal", type=int)
    p.add_argument("--anomaly", type=int)
    p.add_argument("--pcap-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on normal samples")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--lambda-g", type=float, default=0.01)
    p.add_argument("--epochs", default="100+50")
    p.add_argument("--lr", help="phase learning rates, e.g. 1e-4+1e-5")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--d", default="50", help="latent size or 'auto' (95%% PCA variance)")
    p.add_argument("--loss", choices=["mssim", "l2"], default="mssim")
    p.add_argument("--no-adversarial", action="store_true", help="plain autoencoder (no critic)")
    p.add_argument("--normal-only", action="store_true",
                   help="drop anomaly-labeled samples instead of refusing the file")
    p.add_argument("--losses", help="loss history CSV (default: losses.csv next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="anomaly scores for an ARCD file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=1024)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common], help="threshold + metrics from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--policy", default="p99", help="p99, max, or a quantile in (0, 1]")
    p.add_argument("--report", required=True)
    p.add_argument("--fit-scores", help="scores CSV whose normal rows fit the threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="run a sweep described by --config")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bench", parents=[common], help="flows/s scoring throughput")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-sizes", default="1,64,1024")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=float, default=5.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
