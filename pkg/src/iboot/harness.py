"""Pretraining loop, evaluation dispatch and checkpoint handling."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from iboot.augment import augment
from iboot.config import RunConfig, code_version
from iboot.dataset import (
    Clip,
    VideoRecord,
    clip_span,
    load_dataset,
    make_synthetic_dataset,
    sample_views,
    save_dataset,
    split,
)
from iboot.encoders import MomentumBranch, OnlineNetwork, TargetAdapter, build_target, ema_update
from iboot.evaluation import (
    EvalReport,
    extract_features,
    finetune,
    knn_eval,
    knn_scores,
    linear_probe,
    semi_split,
    _report,
)
from iboot.objective import total_loss
from iboot.optim import build_lars, lr_at, set_lr
from iboot.storage import MetricsLog, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PROTOCOLS = ("knn", "linear", "finetune", "semi", "multiview")


def load_or_make_dataset(cfg: RunConfig) -> list[VideoRecord]:
    d = cfg.data
    if d.path and Path(d.path).exists():
        return load_dataset(d.path)
    records = make_synthetic_dataset(
        d.num_classes,
        d.videos_per_class,
        d.raw_frames,
        d.spatial_size,
        d.seed,
        val_fraction=d.val_fraction,
        min_raw_frames=clip_span(cfg.encoder.num_frames, cfg.encoder.stride),
    )
    if d.path:
        Path(d.path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(records, d.path)
    return records


def build_targets(cfg: RunConfig, records: Sequence[VideoRecord]) -> dict[str, TargetAdapter]:
    labels = {r.id: r.label for r in records if r.label is not None}
    return {t.name: build_target(t, labels, cfg.data.num_classes) for t in cfg.loss.targets}


def build_model(cfg: RunConfig, targets: dict[str, TargetAdapter]) -> tuple[OnlineNetwork, MomentumBranch | None]:
    dims = {name: t.output_dim for name, t in targets.items()}
    if cfg.loss.aux_ssl:
        dims["momentum"] = cfg.encoder.proj_dim
    model = OnlineNetwork(cfg.encoder, dims)
    momentum = MomentumBranch(model) if cfg.loss.aux_ssl else None
    return model, momentum


@dataclass
class Batch:
    ref: torch.Tensor  # B x T x h x w x 3
    ref_meta: list[Clip]
    online: list[torch.Tensor]  # one B x T x h x w x 3 tensor per online view
    ids: list[str]
    trail: tuple[int, int, int]  # seed, epoch, batch index


def make_batch(videos: Sequence[VideoRecord], cfg: RunConfig, epoch: int, b: int) -> Batch:
    """Every video gets its own rng stream keyed by (seed, epoch, batch, slot),
    so a batch is reproducible in isolation and in any worker."""
    e = cfg.encoder
    refs, metas, online = [], [], [[] for _ in range(max(e.num_online_views, 1))]
    for i, video in enumerate(videos):
        rng = np.random.default_rng([cfg.seed, 1, epoch, b, i])
        views = sample_views(video, e.num_online_views, e.num_frames, e.stride, rng, cfg.data.ref_sampling)
        ref = augment(views.v_ref, cfg.aug, rng)
        refs.append(ref.frames)
        metas.append(ref)
        for j, clip in enumerate(views.online_views):
            online[j].append(augment(clip, cfg.aug, rng).frames)
    return Batch(
        ref=torch.stack(refs),
        ref_meta=metas,
        online=[torch.stack(v) for v in online],
        ids=[v.id for v in videos],
        trail=(cfg.seed, epoch, b),
    )


def epoch_batches(train: Sequence[VideoRecord], cfg: RunConfig, epoch: int) -> Iterator[Batch]:
    """Yield the epoch's batches in order. With ``num_workers > 0`` batches are
    prepared by a thread pool behind a bounded prefetch window; content and
    order do not depend on the worker count."""
    bs = cfg.optim.batch_size
    perm = np.random.default_rng([cfg.seed, 0, epoch]).permutation(len(train))
    chunks = [[train[i] for i in perm[b * bs : (b + 1) * bs]] for b in range(len(train) // bs)]
    if cfg.num_workers <= 0:
        for b, videos in enumerate(chunks):
            yield make_batch(videos, cfg, epoch, b)
        return
    window = 2 * cfg.num_workers
    with ThreadPoolExecutor(cfg.num_workers) as pool:
        pending = []
        for b, videos in enumerate(chunks):
            pending.append(pool.submit(make_batch, videos, cfg, epoch, b))
            if len(pending) >= window:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


class Pretrainer:
    """Owns the online network, optimizer, EMA branch and frozen targets."""

    def __init__(self, cfg: RunConfig, records: Sequence[VideoRecord]):
        self.cfg = cfg
        self.records = list(records)
        self.train_set = split(self.records, "train")
        self.val_set = split(self.records, "val")
        self.steps_per_epoch = len(self.train_set) // cfg.optim.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"{len(self.train_set)} training videos cannot fill a batch of {cfg.optim.batch_size}")
        torch.manual_seed(cfg.seed)
        self.targets = build_targets(cfg, self.records)
        self.model, self.momentum = build_model(cfg, self.targets)
        self.optimizer = build_lars(self.model, cfg.optim)
        self.step = 0
        self.epoch = 0

    def compute_loss(self, batch: Batch) -> tuple[torch.Tensor, dict[str, float]]:
        n_views = len(batch.online)
        _, preds = self.model(torch.cat(batch.online))
        q_sets = {name: list(preds[name].chunk(n_views)) for name in self.targets}
        k_set = {name: t(batch.ref, batch.ref_meta) for name, t in self.targets.items()}
        k_mom = q_mom = None
        if self.momentum is not None:
            k_mom = self.momentum(batch.ref)
            q_mom = list(preds["momentum"].chunk(n_views))
        return total_loss(q_sets, k_set, self.cfg.loss, k_mom, q_mom)

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        if self.momentum is not None:
            self.momentum.train()
        lr = lr_at(self.step, self.steps_per_epoch, self.cfg.optim)
        loss, parts = self.compute_loss(batch)
        if not torch.isfinite(loss):
            seed, epoch, b = batch.trail
            raise FloatingPointError(
                f"non-finite loss at step {self.step}; seed trail: seed={seed} epoch={epoch} batch={b} videos={batch.ids}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        set_lr(self.optimizer, lr)
        self.optimizer.step()
        if self.momentum is not None:
            ema_update(self.momentum, self.model, self.cfg.loss.ema_momentum)
        record = {
            "kind": "train",
            "step": self.step,
            "epoch": self.epoch,
            "lr": lr,
            "loss_total": float(loss.detach()),
            "loss_per_target": {k: v for k, v in parts.items() if k != "aux"},
            "aux_loss": parts.get("aux"),
        }
        self.step += 1
        return record

    def state(self) -> dict:
        return {
            "format": "iboot-checkpoint",
            "model": self.model.state_dict(),
            "momentum": None if self.momentum is None else self.momentum.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "config": self.cfg.to_dict(),
            "code_version": code_version(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, ck: dict) -> None:
        self.model.load_state_dict(ck["model"])
        if self.momentum is not None:
            if ck["momentum"] is None:
                raise ValueError("checkpoint has no momentum branch but aux_ssl is enabled")
            self.momentum.load_state_dict(ck["momentum"])
        self.optimizer.load_state_dict(ck["optimizer"])
        self.step = int(ck["step"])
        self.epoch = int(ck["epoch"])
        torch.set_rng_state(ck["torch_rng"])

    def knn_snapshot(self) -> EvalReport:
        self.model.eval()
        return knn_eval(self.model.features, self.train_set, self.val_set, self.cfg)


@dataclass
class PretrainResult:
    run_dir: Path
    checkpoints: list[Path]
    log_path: Path
    trainer: Pretrainer


def run_pretrain(
    cfg: RunConfig,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
    records: Sequence[VideoRecord] | None = None,
) -> PretrainResult:
    """Sample views -> augment -> online/target encode -> loss -> LARS step ->
    optional EMA update, checkpointing every ``cfg.checkpoint_every`` epochs.

    ``stop_after_epoch`` ends the loop early without changing the schedule."""
    cfg.validate()
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    (run_dir / "run.json").write_text(json.dumps({"seed": cfg.seed, "code_version": code_version()}, indent=2))
    records = load_or_make_dataset(cfg) if records is None else records
    trainer = Pretrainer(cfg, records)
    metrics = MetricsLog(run_dir / "metrics.jsonl")
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck["config"] != cfg.to_dict():
            raise ValueError(f"config differs from the one stored in {resume}")
        trainer.load_state(ck)
        metrics.truncate_after(trainer.step - 1, trainer.epoch - 1)
        log.info("resumed from %s at epoch %d step %d", resume, trainer.epoch, trainer.step)
    checkpoints = []
    t0 = time.perf_counter()
    total = cfg.optim.total_epochs
    while trainer.epoch < total:
        epoch = trainer.epoch
        for batch in epoch_batches(trainer.train_set, cfg, epoch):
            record = trainer.train_step(batch)
            record["wall_clock"] = time.perf_counter() - t0
            metrics.append(record)
        trainer.epoch = epoch + 1
        if cfg.eval.eval_every and trainer.epoch % cfg.eval.eval_every == 0 and trainer.val_set:
            metrics.append_report(trainer.knn_snapshot(), epoch=epoch, step=trainer.step)
        if trainer.epoch % max(cfg.checkpoint_every, 1) == 0 or trainer.epoch == total:
            path = run_dir / f"ckpt_epoch{trainer.epoch:04d}.ckpt"
            save_checkpoint(path, trainer.state())
            checkpoints.append(path)
            log.info("epoch %d: saved %s", trainer.epoch, path)
        if stop_after_epoch is not None and trainer.epoch >= stop_after_epoch:
            break
    return PretrainResult(run_dir=run_dir, checkpoints=checkpoints, log_path=metrics.path, trainer=trainer)


def load_model(checkpoint: str | Path, records: Sequence[VideoRecord] | None = None) -> tuple[OnlineNetwork, RunConfig]:
    ck = load_checkpoint(checkpoint)
    ck_cfg = RunConfig.from_dict(ck["config"])
    torch.manual_seed(ck_cfg.seed)
    names = ck_cfg.loss.target_names + (["momentum"] if ck_cfg.loss.aux_ssl else [])
    dims = {}
    for name in names:
        # feature-file widths are only known from the file; read them off the head
        w = ck["model"].get(f"heads.{name}.3.weight")
        dims[name] = ck_cfg.encoder.proj_dim if w is None else int(w.shape[0])
    model = OnlineNetwork(ck_cfg.encoder, dims)
    model.load_state_dict(ck["model"])
    model.eval()
    return model, ck_cfg


def run_eval(
    cfg: RunConfig,
    checkpoint: str | Path,
    protocol: str,
    records: Sequence[VideoRecord] | None = None,
    log_path: str | Path | None = None,
) -> EvalReport:
    """Evaluate a pretrained checkpoint with one protocol and log the report."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    cfg.validate()
    model, ck_cfg = load_model(checkpoint)
    if ck_cfg.encoder != cfg.encoder:
        raise ValueError("encoder settings in the config do not match the checkpoint")
    records = load_or_make_dataset(cfg) if records is None else records
    train, val = split(records, "train"), split(records, "val")
    if not train or not val:
        raise ValueError("evaluation needs both train and val videos")
    e = cfg.eval
    if protocol == "knn":
        report = knn_eval(model.features, train, val, cfg)
    elif protocol == "multiview":
        t0 = time.perf_counter()
        bank = extract_features(model.features, train, cfg)
        queries = extract_features(model.features, val, cfg, e.test_clips, e.test_crops)
        k = min(e.knn_k, len(bank))
        num_classes = max(r.label for r in records if r.label is not None) + 1
        scores = knn_scores(bank, queries.features, k, e.knn_temperature, num_classes)
        report = _report("multiview", scores.argmax(axis=1), queries.labels, cfg, t0,
                         k=k, clips=e.test_clips, crops=e.test_crops)
    elif protocol == "linear":
        report = linear_probe(model, train, val, cfg)
    elif protocol == "finetune":
        report, _ = finetune(model, train, val, cfg)
    else:
        subset = semi_split(train, e.semi_fraction, cfg.seed)
        report, _ = finetune(model, subset, val, cfg, lr=e.semi_lr, protocol="semi")
        report.config["fraction"] = e.semi_fraction
    report.config["checkpoint"] = str(checkpoint)
    metrics = MetricsLog(log_path or Path(cfg.output_dir) / "metrics.jsonl")
    metrics.append_report(report)
    return report
