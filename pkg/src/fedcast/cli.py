"""Command-line entry point for reproducible experiments.

Subcommands: gen-data, train, evaluate, attack, audit, compare. Every run is
driven by a JSON config validated against a strict schema; results land as a
JSON report (authoritative) plus a flat CSV of (config, split, metric) rows.
Failures exit nonzero with a structured error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from fedcast import attacks as A
from fedcast import data as D
from fedcast import protocol as P
from fedcast.checkpoint import load_checkpoint, save_checkpoint
from fedcast.config import (ConfigError, ExperimentConfig,
                            build_dataset_from_config, load_config)
from fedcast.protocol import Federation, FederationConfig, TrainSettings
from fedcast.seeding import stream


def _federation_from_config(cfg: ExperimentConfig, dataset=None,
                            local_only: bool = False) -> Federation:
    dataset = dataset if dataset is not None else build_dataset_from_config(cfg)
    if local_only:
        dataset = D.FederatedDataset(active=dataset.active, passives=[],
                                     window=dataset.window, horizon=dataset.horizon,
                                     windows=dataset.windows)
    m = cfg.model
    return Federation(
        dataset,
        FederationConfig(hidden=m.hidden, temporal_layers=m.temporal_layers,
                         spatial_layers=m.spatial_layers, neighbors=m.neighbors,
                         heads=m.heads, adaptive_rank=m.adaptive_rank,
                         predict_from_fused=m.predict_from_fused),
        cfg.dp.to_dp_config(), seed=cfg.seed,
    )


def _train_settings(cfg: ExperimentConfig) -> TrainSettings:
    o = cfg.optimizer
    return TrainSettings(lr=o.lr, weight_decay=o.weight_decay,
                         batch_size=o.batch_size, max_epochs=o.max_epochs,
                         patience=o.patience)


def emit_report(out_dir: Path, name: str, report: dict,
                metric_rows: list[tuple[str, str, str, float]] | None = None) -> Path:
    """Write the JSON record plus a CSV of (config, split, metric, value) rows."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    if metric_rows is not None:
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config", "split", "metric", "value"])
            for row in metric_rows:
                writer.writerow(row)
    return json_path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-data requires data.kind 'synthetic'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    active, passive = D.generate_synthetic(
        cfg.seed, d.n_active, d.n_passive, d.steps, d.horizon, d.coupling,
        n_features_active=d.features_active, n_features_passive=d.features_passive,
        n_output_features=d.output_features,
        passive_rate_factor=d.passive_rate_factor,
    )
    for panel in (active, passive):
        D.save_csv(panel, out / f"{panel.party_id}_series.csv",
                   out / f"{panel.party_id}_locations.csv")
    print(f"wrote panels for seed {cfg.seed} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    started = time.time()
    fed = _federation_from_config(cfg)
    history = fed.train(_train_settings(cfg))
    train_seconds = time.time() - started
    split_metrics = {split: fed.evaluate(split) for split in ("train", "valid", "test")}
    report_audit = P.audit(fed.transcript)
    out.mkdir(parents=True, exist_ok=True)
    fed.transcript.save(out / "transcript.json")
    with open(out / "audit.json", "w", encoding="utf-8") as fh:
        json.dump(report_audit.to_dict(), fh, indent=1)
    save_checkpoint(out / "checkpoint.json", fed, cfg, history)
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "metrics": split_metrics,
        "audit": report_audit.to_dict(),
        "history": history,
        "timings": {"train_seconds": train_seconds},
    }
    rows = [("train", split, metric, value)
            for split, ms in split_metrics.items() for metric, value in ms.items()]
    path = emit_report(out, "report", report, rows)
    print(f"trained for {len(history['train_loss'])} epochs; report at {path}")
    return 0 if report_audit.ok else 1


def cmd_evaluate(args) -> int:
    fed, cfg, _ = load_checkpoint(args.checkpoint)
    metrics = fed.evaluate(args.split)
    print(json.dumps({"split": args.split, "metrics": metrics}, indent=1))
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    fed, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    out = Path(cfg.output_dir)
    a = cfg.attack
    ds = fed.dataset
    attack_rng_seed = cfg.seed
    windows = A.select_attack_targets(
        ds.windows["test"], lambda w: ds.passive_window(0, w),
        count=a.targets, seed=attack_rng_seed)
    noise_rng = stream(cfg.seed, "attack-noise")
    targets, truth = A.collect_published(fed, windows, noise_rng=noise_rng)
    shape = truth[0].shape
    kinds = ([a.kind] if a.kind != "all"
             else ["white-box", "query-free", "mean", "random-guess"])
    reports = []
    for kind in kinds:
        started = time.time()
        if kind == "white-box":
            rep = A.whitebox_attack(targets, fed.passives[0], shape, truth,
                                    level=a.level, clip=fed.dp.clip, lam=a.lam,
                                    beta=a.beta, steps=a.steps, lr=a.lr,
                                    weight_decay=a.weight_decay, seed=cfg.seed)
        elif kind == "query-free":
            rep = A.queryfree_attack(targets, fed, shape, truth, level=a.level,
                                     budget_epochs=a.budget_epochs, seed=cfg.seed,
                                     lam=a.lam, beta=a.beta, steps=a.steps,
                                     lr=a.lr, weight_decay=a.weight_decay)
        elif kind in ("mean", "random-guess"):
            rep = A.baseline_attack(kind, truth, seed=cfg.seed,
                                    distribution=a.distribution)
        else:
            raise ConfigError(f"unknown attack kind {kind!r}")
        entry = rep.to_dict()
        entry["seconds"] = time.time() - started
        reports.append(entry)
        print(f"{kind:>12}: InfoLeak={rep.infoleak:.4f}  scaled MAE={rep.scaled_mae:.4f}")
    report = {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint),
              "target_windows": windows, "attacks": reports}
    rows = [(r["kind"], "test", metric, r[key])
            for r in reports
            for metric, key in (("InfoLeak", "infoleak"), ("scaled_MAE", "scaled_mae"))]
    emit_report(out, "attack_report", report, rows)
    return 0


def cmd_audit(args) -> int:
    transcript = P.Transcript.load(args.transcript)
    report = P.audit(transcript)
    print(json.dumps(report.to_dict(), indent=1))
    return 0 if report.ok else 1


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    dataset = build_dataset_from_config(cfg)
    results = {}
    for label, local_only in (("local", True), ("federated", False)):
        fed = _federation_from_config(cfg, dataset=dataset, local_only=local_only)
        fed.train(_train_settings(cfg))
        results[label] = fed.evaluate("test")
    uplift = {metric: results["federated"][metric] / max(results["local"][metric], 1e-12)
              for metric in results["local"]}
    report = {"config": cfg.to_dict(), "metrics": results, "uplift_ratio": uplift}
    rows = [(label, "test", metric, value)
            for label, ms in results.items() for metric, value in ms.items()]
    emit_report(out, "compare", report, rows)
    print(f"{'metric':<8}{'local':>12}{'federated':>12}{'ratio':>10}")
    for metric in ("MAE", "RMSE", "SMAPE"):
        print(f"{metric:<8}{results['local'][metric]:>12.4f}"
              f"{results['federated'][metric]:>12.4f}{uplift[metric]:>10.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcast",
        description="federated spatiotemporal forecasting lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic panels as CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the federation and emit reports")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.set_defaults(fn=cmd_evaluate)

    at = sub.add_parser("attack", help="run inference attacks against a checkpoint")
    at.add_argument("--config", required=True)
    at.add_argument("--checkpoint", required=True)
    at.set_defaults(fn=cmd_attack)

    au = sub.add_parser("audit", help="audit a saved protocol transcript")
    au.add_argument("--transcript", required=True)
    au.set_defaults(fn=cmd_audit)

    c = sub.add_parser("compare", help="train local-only vs federated and report uplift")
    c.add_argument("--config", required=True)
    c.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, D.DataError, P.ProtocolError, P.TrainingDiverged,
            A.AttackError, FileNotFoundError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr, indent=1)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
