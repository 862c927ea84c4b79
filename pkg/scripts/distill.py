"""Desk-scale distillation run against the oracle image target.

Reports the kNN accuracy of the untrained encoder, the smoothed loss curve and
kNN snapshots during training, then renders the standard plots.

    python scripts/distill.py --out runs/distill [--set optim.trust_coefficient=0.001 ...]
"""
import argparse
import json
import time

from iboot.config import RunConfig, apply_overrides
from iboot.evaluation import knn_eval
from iboot.harness import Pretrainer, load_or_make_dataset, run_pretrain
from iboot.plots import emit_plots, moving_average
from iboot.storage import read_log


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/distill")
    ap.add_argument("--eval-every", type=int, default=5)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = RunConfig.from_dict(apply_overrides(RunConfig().to_dict(), args.set))
    cfg.output_dir = args.out
    cfg.eval.eval_every = args.eval_every
    cfg.validate()

    t0 = time.perf_counter()
    records = load_or_make_dataset(cfg)
    init = Pretrainer(cfg, records)
    init.model.eval()
    random_top1 = knn_eval(init.model.features, init.train_set, init.val_set, cfg).top1
    result = run_pretrain(cfg, records=records)
    result.trainer.model.eval()
    final = result.trainer.knn_snapshot().top1

    log = read_log(result.log_path)
    smooth = moving_average([r["loss_total"] for r in log if r["kind"] == "train"], 20)
    summary = {
        "random_init_knn": random_top1,
        "final_knn": final,
        "smoothed_loss_first": float(smooth[0]),
        "smoothed_loss_last": float(smooth[-1]),
        "loss_drop": float(1 - smooth[-1] / smooth[0]),
        "knn_by_epoch": {r["epoch"] + 1: r["top1"] for r in log if r["kind"] == "eval" and "epoch" in r},
        "seconds": time.perf_counter() - t0,
    }
    print(json.dumps(summary, indent=2))
    emit_plots(result.log_path, result.run_dir / "plots")


if __name__ == "__main__":
    main()
