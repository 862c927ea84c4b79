"""Run every evaluation protocol on one checkpoint and print a summary table.

    python scripts/eval_all.py --checkpoint runs/distill/ckpt_epoch0030.ckpt
"""
import argparse
from pathlib import Path

from iboot.harness import PROTOCOLS, load_model, run_eval


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", type=Path, required=True)
    ap.add_argument("--protocols", nargs="*", default=list(PROTOCOLS), choices=PROTOCOLS)
    args = ap.parse_args()

    _, cfg = load_model(args.checkpoint)
    for protocol in args.protocols:
        report = run_eval(cfg, args.checkpoint, protocol)
        print(f"{protocol:10s} top-1 {report.top1:.3f}  ({report.wall_clock:.1f}s, {report.num_queries} queries)", flush=True)


if __name__ == "__main__":
    main()
