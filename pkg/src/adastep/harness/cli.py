"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import RunConfig, load_config
from .pipeline import Lab

STAGES = ("gen-data", "train-denoiser", "build-table", "train-policy", "eval", "analyze", "sweep", "transfer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adastep", description="Adaptive DDIM step selection lab.")
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="artifact directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        if name == "sweep":
            p.add_argument("--axis", choices=("k", "lam", "both"), default="both")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise SystemExit("--seed must be an unsigned 64-bit integer")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    lab = Lab(resolve_config(args))
    cmd = args.command
    try:
        if cmd == "gen-data":
            train, test, transfer = lab.gen_data()
            print(f"train {len(train)}  test {len(test)}  transfer {len(transfer)} prompts -> {lab.out}")
        elif cmd == "train-denoiser":
            lab.train_denoiser()
            print(f"denoiser checkpoint -> {lab.path('denoiser.ckpt')}")
        elif cmd == "build-table":
            lab.build_table()
            print(f"quality tables -> {lab.path('table_train.txt')}, {lab.path('table_test.txt')}")
        elif cmd == "train-policy":
            lab.train_policy()
            print(f"selector checkpoint -> {lab.path('policy.ckpt')}")
        elif cmd == "eval":
            report, _ = lab.evaluate()
            print(report.to_text(), end="")
        elif cmd == "analyze":
            print(lab.analyze().to_csv(), end="")
        elif cmd == "sweep":
            axes = ("k", "lam") if args.axis == "both" else (args.axis,)
            for p in lab.sweep(axes):
                print(f"{p.axis}={p.value:g}  mean steps {p.mean_steps:.2f}  quality {p.mean_quality:.4f}")
        elif cmd == "transfer":
            print(lab.transfer().to_text(), end="")
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
