"""Post-hoc figures from a metrics log."""
from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from iboot.storage import read_log  # noqa: E402

LOSS_PNG = "loss_vs_step.png"
LR_PNG = "lr_vs_step.png"
ACC_PNG = "accuracy_vs_epoch.png"


def moving_average(values, window: int = 20) -> np.ndarray:
    """Trailing mean over full windows only (length ``len(values) - window + 1``)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        raise ValueError(f"need at least {window} values, got {len(values)}")
    return np.convolve(values, np.ones(window) / window, mode="valid")


def emit_plots(log_path: str | Path, out_dir: str | Path) -> list[Path]:
    records = read_log(log_path) if Path(log_path).exists() else []
    train = [r for r in records if r.get("kind") == "train"]
    evals = [r for r in records if r.get("kind") == "eval" and "epoch" in r]
    if not train and not evals:
        raise ValueError(f"metrics log {log_path} has no records to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if train:
        steps = [r["step"] for r in train]
        fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
        ax.plot(steps, [r["loss_total"] for r in train], label="total", lw=1)
        names = sorted({n for r in train for n in r.get("loss_per_target", {})})
        if len(names) > 1:
            for n in names:
                ax.plot(steps, [r["loss_per_target"].get(n, float("nan")) for r in train], label=n, lw=0.8)
        if any(r.get("aux_loss") is not None for r in train):
            ax.plot(steps, [r.get("aux_loss") or float("nan") for r in train], label="aux (EMA)", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / LOSS_PNG)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
        ax.plot(steps, [r["lr"] for r in train])
        ax.set_xlabel("step")
        ax.set_ylabel("learning rate")
        fig.tight_layout()
        fig.savefig(out / LR_PNG)
        plt.close(fig)
        written += [out / LOSS_PNG, out / LR_PNG]
    if evals:
        fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
        for protocol in sorted({r["protocol"] for r in evals}):
            rs = [r for r in evals if r["protocol"] == protocol]
            ax.plot([r["epoch"] + 1 for r in rs], [r["top1"] for r in rs], marker="o", label=protocol)
        ax.set_xlabel("epoch")
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / ACC_PNG)
        plt.close(fig)
        written.append(out / ACC_PNG)
    return written
