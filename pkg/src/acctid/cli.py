"""Command-line entry point.

Typical chain::

    acctid --seed 7 gen --records rec.csv --labels labels.csv
    acctid build rec.csv --out graph.lwaig
    acctid sample graph.lwaig --labels labels.csv --strategy amount --out-dir data --name Eth
    acctid train data/Eth-A --out run
    acctid eval run/checkpoint.hgate data/Eth-A --out run/eval.json

Failures print one JSON object to stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import account_features, cross_validate_lr, read_feature_csv, write_feature_csv
from .config import load_config
from .errors import AcctIdError, ConfigError
from .graph import attach_labels, build_lw_aig, load_snapshot, read_labels, save_snapshot, write_labels
from .hgate import load_checkpoint, save_checkpoint
from .records import ingest_records, write_records
from .sampler import (
    SamplingStrategy,
    build_dataset,
    build_multiclass_dataset,
    dataset_dir_name,
    load_dataset,
    save_dataset,
)
from .synthetic import ARCHETYPES, SyntheticSpec, gen_synthetic
from .trainer import cross_validate, embed, evaluate, history_writer

log = logging.getLogger("acctid")

# train flags that map onto TrainConfig fields
_TRAIN_FLAGS = {
    "hops": int, "k": int, "layers": int, "dim": int, "tau": float, "lam": float, "p": float,
    "batch_size": int, "lr": float, "dropout": float, "patience": int, "max_epochs": int,
    "folds": int, "repeats": int, "aug": str, "optimizer": str, "pred_on": str,
    "label_fraction": float,
}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_counts(text):
    out = {}
    for part in text.split(","):
        name, _, num = part.partition("=")
        if name.strip() not in ARCHETYPES:
            raise ConfigError(f"unknown archetype {name.strip()!r}; expected one of {sorted(ARCHETYPES)}")
        out[name.strip()] = int(num)
    return out


# --- commands ---------------------------------------------------------------------

def cmd_gen(args) -> None:
    spec = SyntheticSpec()
    if args.counts:
        spec = spec.with_counts(**_parse_counts(args.counts))
    elif args.per_class is not None:
        spec = spec.with_counts(**{c: args.per_class for c in spec.counts})
    if args.background is not None:
        spec = replace(spec, background=args.background)
    records, labels = gen_synthetic(spec, args.seed)
    write_records(records, args.records, args.format)
    write_labels(labels, args.labels)
    log.info("wrote %d records and %d labels", len(records), len(labels))


def cmd_build(args) -> None:
    graph = build_lw_aig(ingest_records(args.records, args.format))
    if args.labels:
        graph, missing = attach_labels(graph, read_labels(args.labels))
        if missing:
            log.warning("%d labeled accounts are not EOA nodes of the graph", len(missing))
    save_snapshot(graph, args.out)
    log.info("graph: %d nodes, %d edges, %d contracts", graph.num_nodes, graph.num_edges, graph.num_contracts)


def cmd_sample(args) -> None:
    graph = load_snapshot(args.graph)
    if args.labels:
        graph, missing = attach_labels(graph, read_labels(args.labels))
        if missing:
            log.warning("%d labeled accounts are not EOA nodes of the graph", len(missing))
    names = [s for part in args.strategy for s in part.replace("|", ",").split(",") if s.strip()]
    for name in names:
        strat = SamplingStrategy(name, args.hops, args.k)
        if args.positive:
            data = build_dataset(graph, strat, args.positive, args.negative_ratio, args.seed)
        else:
            data = build_multiclass_dataset(graph, strat)
        out = Path(args.out_dir) / dataset_dir_name(args.name, strat)
        meta = {"name": out.name, "strategy": strat.indicator, "hops": strat.hops, "k": strat.k,
                "positive": args.positive, "seed": args.seed}
        save_dataset(data, out, meta)
        print(out)


def _train_config(args):
    overrides = {k: getattr(args, k, None) for k in _TRAIN_FLAGS}
    if args.seed_given:
        overrides["seed"] = args.seed
    return load_config(args.config, **overrides)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data, meta = load_dataset(args.dataset)
    graph = load_snapshot(args.graph) if args.graph else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sink = history_writer(out / "history.jsonl")
    try:
        res = cross_validate(data, cfg, meta["classes"], graph, use_contrast=not args.no_contrast,
                             history_sink=sink)
    finally:
        sink.close()
    best = res["best"]
    save_checkpoint(out / "checkpoint.hgate", best.model, best.normalizer, best.classes,
                    {"config": cfg.to_dict(), "dataset": meta.get("name"), "best_epoch": best.best_epoch})
    metrics = {"dataset": meta.get("name"), "strategy": meta.get("strategy"), "config": cfg.to_dict(),
               "folds": res["folds"], "mean_f1": res["mean_f1"], "std_f1": res["std_f1"]}
    _write_json(out / "metrics.json", metrics)
    print(f"micro-F1 {res['mean_f1']:.4f} +- {res['std_f1']:.4f}")


def cmd_eval(args) -> None:
    model, normalizer, classes, ck_meta = load_checkpoint(args.checkpoint)
    data, meta = load_dataset(args.dataset)
    res = evaluate(model, normalizer, data, classes, args.folds, args.repeats, args.seed)
    metrics = {"dataset": meta.get("name"), "strategy": meta.get("strategy"),
               "config": ck_meta.get("config", {}), **res}
    _write_json(args.out, metrics)
    print(f"micro-F1 {res['mean_f1']:.4f} +- {res['std_f1']:.4f}")


def cmd_features(args) -> None:
    records = ingest_records(args.records, args.format)
    if args.labels:
        pairs = read_labels(args.labels)
    else:
        seen = {}
        for r in records:
            if not r.from_is_contract:
                seen.setdefault(r.sender, None)
            if not r.to_is_contract:
                seen.setdefault(r.receiver, None)
        pairs = list(seen.items())
    accounts = [a for a, _ in pairs]
    write_feature_csv(args.out, accounts, [y for _, y in pairs], account_features(records, accounts))


def cmd_baseline(args) -> None:
    accounts, labels, x = read_feature_csv(args.features)
    keep = [i for i, y in enumerate(labels) if y is not None]
    res = cross_validate_lr(x[keep], [labels[i] for i in keep], args.folds, args.repeats, args.seed,
                            args.l2, args.epochs)
    metrics = {"dataset": Path(args.features).name, "strategy": None,
               "config": {"l2": args.l2, "epochs": args.epochs, "folds": args.folds,
                          "repeats": args.repeats, "seed": args.seed}, **res}
    _write_json(args.out, metrics)
    print(f"micro-F1 {res['mean_f1']:.4f} +- {res['std_f1']:.4f}")


def cmd_embed(args) -> None:
    model, normalizer, _, _ = load_checkpoint(args.checkpoint)
    data, _ = load_dataset(args.dataset)
    g = embed(model, normalizer, data) if data else np.zeros((0, model.dim))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subgraph", "account"] + [f"g{i}" for i in range(model.dim)])
        for i, (sub, row) in enumerate(zip(data, g)):
            w.writerow([i, sub.account] + [repr(float(v)) for v in row])


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acctid", description="Account identification on transaction graphs")
    ap.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    ap.add_argument("--config", default=None, help="key=value training config file")
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version", action="version", version=f"acctid {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic records and labels")
    p.add_argument("--records", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--counts", default=None, help="e.g. exchange=50,mining=20")
    p.add_argument("--background", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build", help="records -> lw-AIG snapshot")
    p.add_argument("records")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("sample", help="snapshot + labels -> subgraph dataset directories")
    p.add_argument("graph")
    p.add_argument("--labels", default=None)
    p.add_argument("--strategy", action="append", default=None,
                   help="amount, times or avgAmount; repeat or separate with , or |")
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="Eth")
    p.add_argument("--positive", default=None, help="binary dataset for this class")
    p.add_argument("--negative-ratio", type=float, default=1.0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="dataset -> checkpoint, history and metrics")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--graph", default=None, help="snapshot, needed by the resample augmentation")
    for name, kind in _TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        extra = ["--lambda"] if name == "lam" else (["--epochs"] if name == "max_epochs" else [])
        p.add_argument(flag, *extra, dest=name, type=kind, default=None)
    p.add_argument("--no-contrast", action="store_true", help="drop the contrast term entirely")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="checkpoint + dataset -> metrics")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("features", help="records -> manual feature CSV")
    p.add_argument("records")
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("baseline", help="feature CSV -> logistic regression metrics")
    p.add_argument("features")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=500)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("embed", help="checkpoint + dataset -> embedding CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.command == "sample" and not args.strategy:
        args.strategy = ["amount"]
    try:
        args.func(args)
    except AcctIdError as exc:
        print(json.dumps(exc.report(), sort_keys=True), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        report = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, OSError) and exc.filename:
            report["path"] = str(exc.filename)
        print(json.dumps(report, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
