"""Small ablation grid over the objective's design choices.

Each variant pretrains from the same seed and is scored by kNN on held-out
videos. Variants: temporal pooling on/off, number of online views, reference
clip sampling, and the EMA auxiliary branch.

    python scripts/ablate.py --out runs/ablate --epochs 15
"""
import argparse
import json

from iboot.config import RunConfig, apply_overrides
from iboot.harness import load_or_make_dataset, run_pretrain

VARIANTS = {
    "default": [],
    "per_frame": ["loss.temporal_pool=false"],
    "one_view": ["encoder.num_online_views=1"],
    "ref_as_view": ["encoder.num_online_views=0"],
    "anchored_ref": ["data.ref_sampling=anchored"],
    "aux_ema": ["loss.aux_ssl=true", "loss.aux_weight=0.5"],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--only", nargs="*", default=None, choices=sorted(VARIANTS))
    args = ap.parse_args()

    base = RunConfig()
    base.optim.total_epochs = args.epochs
    base.optim.warmup_epochs = min(base.optim.warmup_epochs, args.epochs)
    records = load_or_make_dataset(base)
    rows = {}
    for name, overrides in VARIANTS.items():
        if args.only and name not in args.only:
            continue
        cfg = RunConfig.from_dict(apply_overrides(base.to_dict(), overrides + [f"output_dir={args.out}/{name}"]))
        result = run_pretrain(cfg.validate(), records=records)
        result.trainer.model.eval()
        rows[name] = result.trainer.knn_snapshot().top1
        print(f"{name:14s} kNN top-1 {rows[name]:.3f}", flush=True)
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
