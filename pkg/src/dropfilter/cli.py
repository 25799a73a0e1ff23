"""Command-line entry point: train, eval, sweep, aggregate, validate."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import DropFilterError
from .harness import (aggregate_dir, evaluate, load_config, load_data, summary_csv,
                      sweep_retain_rate, train_run)
from .models import build_model
from .validation import run_suite


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    metrics = train_run(cfg, seed, args.out)
    if metrics.failed:
        print(f"run failed: non-finite loss at epoch {metrics.failed_epoch}", file=sys.stderr)
        return 2
    print(f"final test_error {metrics.final_test_error:.6g} -> {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    train, test = load_data(cfg)
    model = build_model(replace(cfg.model, num_classes=train.num_classes))
    load_checkpoint(model, args.checkpoint)
    err = evaluate(model, test, train.channel_means, cfg.eval_batch_size)
    print(f"test_error {err:.6g}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seeds = _ints(args.seeds) if args.seeds else list(cfg.seeds)
    table = sweep_retain_rate(cfg, _floats(args.rates), seeds, args.out, jobs=args.jobs)
    sys.stdout.write(summary_csv(table))
    return 0


def cmd_aggregate(args) -> int:
    table = aggregate_dir(args.in_dir)
    text = summary_csv(table)
    (Path(args.in_dir) / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_validate(args) -> int:
    fields = ["suite", "check", "value", "bound", "passed"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    failures = 0
    try:
        writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in run_suite(args.suite, args.seed):
            failures += not row["passed"]
            writer.writerow(row)
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    if failures:
        print(f"{failures} check(s) failed", file=sys.stderr)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropfilter", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run and write metrics.csv + checkpoint.bin")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train every (rate, seed) pair and summarize per rate")
    p.add_argument("--config", required=True)
    p.add_argument("--rates", required=True, help="comma-separated, e.g. 0.8,0.9,1.0")
    p.add_argument("--seeds", help="comma-separated; defaults to the config's seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("aggregate", help="summarize every run.json under a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("validate", help="run statistical / gradient checks, CSV report")
    p.add_argument("--suite", choices=["masks", "expectation", "gradients", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the CSV report here instead of stdout")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except DropFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
