"""Command line entry points: make-data, pretrain, eval, plots."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from iboot.config import load_config
from iboot.dataset import save_dataset


def _config(args: argparse.Namespace):
    return load_config(args.config, args.set or [])


def cmd_make_data(args: argparse.Namespace) -> int:
    from iboot.harness import load_or_make_dataset

    cfg = _config(args)
    out = Path(args.out or cfg.data.path or Path(cfg.output_dir) / "dataset.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.data.path = ""
    records = load_or_make_dataset(cfg)
    save_dataset(records, out)
    print(f"wrote {len(records)} videos to {out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    from iboot.harness import run_pretrain

    cfg = _config(args)
    result = run_pretrain(cfg, resume=args.resume)
    for p in result.checkpoints:
        print(p)
    print(f"metrics: {result.log_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from iboot.harness import run_eval

    cfg = _config(args)
    report = run_eval(cfg, args.checkpoint, args.protocol)
    print(json.dumps(report.to_record(), indent=2))
    return 0


def cmd_plots(args: argparse.Namespace) -> int:
    from iboot.plots import emit_plots

    for p in emit_plots(args.log, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iboot")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted path)")

    p = sub.add_parser("make-data", help="generate and store the synthetic video corpus")
    with_config(p)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    with_config(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--protocol", required=True, choices=["knn", "linear", "finetune", "semi", "multiview"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plots", help="render figures from a metrics log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plots)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
