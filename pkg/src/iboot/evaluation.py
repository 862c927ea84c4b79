"""Evaluation protocols on frozen or fine-tuned video encoders: weighted kNN,
linear probe, fine-tuning, per-class label subsampling and dense
multi-clip / multi-crop inference."""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from iboot.augment import CROP_POSITIONS, apply_aug, augment, eval_params
from iboot.config import AugConfig, RunConfig
from iboot.dataset import Clip, VideoRecord, clip_span, read_clip, sample_clip
from iboot.optim import set_lr, warmup_cosine


@dataclass(frozen=True)
class FeatureBank:
    features: np.ndarray  # N x D, unit rows
    labels: np.ndarray  # N, int64
    ids: tuple[str, ...]

    def __post_init__(self):
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("feature bank is empty")
        if self.labels.shape != (n,) or len(self.ids) != n:
            raise ValueError("features, labels and ids disagree on N")
        norms = np.linalg.norm(self.features, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6, rtol=0):
            raise ValueError("feature bank rows must be L2-normalized")
        if (self.labels < 0).any():
            raise ValueError("negative class label in bank")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class EvalReport:
    protocol: str
    top1: float
    per_class: dict[int, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    num_queries: int = 0

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return {"kind": "eval", **rec}


def dense_starts(num_frames: int, span: int, clips: int) -> list[int]:
    """Uniformly spaced window starts covering the video; one clip is centered."""
    last = num_frames - span
    if last < 0:
        raise ValueError(f"video of {num_frames} frames cannot hold a {span}-frame window")
    if clips == 1:
        return [last // 2]
    return [int(round(x)) for x in np.linspace(0, last, clips)]


def view_clips(
    video: VideoRecord, T: int, stride: int, clips: int, crops: int, short: int, crop_size: int
) -> list[Clip]:
    if crops not in CROP_POSITIONS:
        raise ValueError(f"crops must be one of {sorted(CROP_POSITIONS)}")
    views = []
    for start in dense_starts(video.num_frames, clip_span(T, stride), clips):
        clip = read_clip(video, T, stride, start)
        hw = tuple(clip.frames.shape[1:3])
        for pos in CROP_POSITIONS[crops]:
            views.append(apply_aug(clip, eval_params(hw, short, crop_size, pos)))
    return views


def _stack(clips: Sequence[Clip]) -> torch.Tensor:
    return torch.stack([c.frames for c in clips])


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise FloatingPointError(f"zero-norm {what}; refusing to normalize")
    return x / norms


@torch.no_grad()
def extract_features(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    records: Sequence[VideoRecord],
    cfg: RunConfig,
    clips_per_video: int | None = None,
    crops_per_clip: int | None = None,
) -> FeatureBank:
    """Average the (unit) features of every clip/crop view of a video, then
    re-normalize. ``encoder`` maps ``B x T x H x W x 3`` to ``B x D``."""
    if not records:
        raise ValueError("cannot extract features from an empty dataset")
    clips = clips_per_video or cfg.eval.bank_clips
    crops = crops_per_clip or cfg.eval.bank_crops
    rows = []
    for video in records:
        views = view_clips(
            video, cfg.encoder.num_frames, cfg.encoder.stride, clips, crops,
            cfg.aug.resize_short_range[0], cfg.aug.crop_size,
        )
        f = encoder(_stack(views)).double().numpy()
        rows.append(_normalize_rows(f, "view feature").mean(axis=0))
    features = _normalize_rows(np.stack(rows), "averaged feature")
    labels = np.array([-1 if r.label is None else r.label for r in records], dtype=np.int64)
    return FeatureBank(features=features, labels=labels, ids=tuple(r.id for r in records))


def knn_scores(bank: FeatureBank, queries: np.ndarray, k: int, temperature: float, num_classes: int | None = None) -> np.ndarray:
    """Per-class vote totals for each query row; votes are exp(sim / temperature)
    from the k most similar bank rows (ties in similarity go to the lower row)."""
    if k > len(bank):
        raise ValueError(f"k={k} exceeds bank size {len(bank)}")
    if k < 1 or temperature <= 0:
        raise ValueError("k must be >= 1 and temperature > 0")
    queries = np.atleast_2d(queries)
    c = num_classes or int(bank.labels.max()) + 1
    sims = queries @ bank.features.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    weights = np.exp(top / temperature)
    scores = np.zeros((queries.shape[0], c))
    rows = np.repeat(np.arange(queries.shape[0]), k)
    np.add.at(scores, (rows, bank.labels[order].ravel()), weights.ravel())
    return scores


def knn_classify(bank: FeatureBank, query: np.ndarray, k: int = 20, temperature: float = 0.07) -> tuple[int, np.ndarray]:
    scores = knn_scores(bank, query, k, temperature)[0]
    return int(np.argmax(scores)), scores  # argmax keeps the lowest index on ties


def knn_top1(bank_train: FeatureBank, bank_val: FeatureBank, k: int = 20, temperature: float = 0.07) -> float:
    scores = knn_scores(bank_train, bank_val.features, k, temperature, num_classes=int(max(bank_train.labels.max(), bank_val.labels.max())) + 1)
    return float((scores.argmax(axis=1) == bank_val.labels).mean())


def semi_split(records: Sequence[VideoRecord], fraction: float, seed: int) -> list[VideoRecord]:
    """Per class keep max(1, round(fraction * count)) videos, chosen uniformly
    without replacement. Python's round is half-to-even. Original order is kept.
    For a fixed seed, a smaller fraction selects a subset of a larger one."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        if r.label is None:
            raise ValueError(f"video {r.id} has no label")
        by_class.setdefault(r.label, []).append(i)
    keep = []
    for label in sorted(by_class):
        idx = by_class[label]
        n = max(1, round(fraction * len(idx)))
        rng = np.random.default_rng([seed, label])
        keep.extend(rng.permutation(idx)[:n].tolist())
    return [records[i] for i in sorted(keep)]


@torch.no_grad()
def multi_view_predict(
    model: Callable[[torch.Tensor], torch.Tensor],
    video: VideoRecord,
    cfg: RunConfig,
    clips: int = 10,
    crops: int = 3,
) -> np.ndarray:
    """Mean softmax over ``clips`` densely spaced windows x ``crops`` crops."""
    views = view_clips(
        video, cfg.encoder.num_frames, cfg.encoder.stride, clips, crops,
        cfg.aug.resize_short_range[0], cfg.aug.crop_size,
    )
    logits = model(_stack(views))
    return F.softmax(logits.double(), dim=-1).mean(dim=0).numpy()


def _report(protocol: str, preds: np.ndarray, labels: np.ndarray, cfg: RunConfig, t0: float, **extra) -> EvalReport:
    per_class = {int(c): float((preds[labels == c] == c).mean()) for c in np.unique(labels)}
    return EvalReport(
        protocol=protocol,
        top1=float((preds == labels).mean()),
        per_class=per_class,
        config={**extra},
        wall_clock=time.perf_counter() - t0,
        num_queries=int(labels.size),
    )


def _labels(records: Sequence[VideoRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def _num_classes(*groups: Sequence[VideoRecord]) -> int:
    return max(r.label for g in groups for r in g) + 1


def _predict_dataset(model, records, cfg, clips, crops) -> np.ndarray:
    return np.array([int(np.argmax(multi_view_predict(model, v, cfg, clips, crops))) for v in records])


def knn_eval(encoder, train: Sequence[VideoRecord], val: Sequence[VideoRecord], cfg: RunConfig) -> EvalReport:
    t0 = time.perf_counter()
    bank = extract_features(encoder, train, cfg)
    queries = extract_features(encoder, val, cfg)
    k = min(cfg.eval.knn_k, len(bank))
    scores = knn_scores(bank, queries.features, k, cfg.eval.knn_temperature, _num_classes(train, val))
    return _report("knn", scores.argmax(axis=1), queries.labels, cfg, t0, k=k, temperature=cfg.eval.knn_temperature)


def _param_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _sgd_schedule(epoch_steps: int, epochs: int, warmup_epochs: int, peak: float):
    total = max(epochs * epoch_steps, 1)
    warm = min(warmup_epochs * epoch_steps, total)
    return lambda step: warmup_cosine(step, warm, total, peak)


def linear_probe(
    encoder: nn.Module,
    train: Sequence[VideoRecord],
    val: Sequence[VideoRecord],
    cfg: RunConfig,
    epochs: int | None = None,
) -> EvalReport:
    """Train a linear layer on frozen, L2-normalized features of the center
    clip; evaluate with dense multi-view inference. Asserts the encoder is
    left bitwise unchanged."""
    t0 = time.perf_counter()
    e = cfg.eval
    epochs = e.linear_epochs if epochs is None else epochs
    before = _param_snapshot(encoder)
    was_training = encoder.training
    encoder.eval()
    features = encoder.features if hasattr(encoder, "features") else encoder
    bank = extract_features(features, train, cfg, 1, 1)
    x = torch.from_numpy(bank.features).float()
    y = torch.from_numpy(bank.labels)
    num_classes = _num_classes(train, val)

    torch.manual_seed(cfg.seed)
    head = nn.Linear(x.shape[1], num_classes)
    nn.init.normal_(head.weight, std=0.01)
    nn.init.zeros_(head.bias)
    opt = torch.optim.SGD(head.parameters(), lr=0.0, momentum=0.9)
    bs = e.linear_batch_size
    steps = (len(x) + bs - 1) // bs
    schedule = _sgd_schedule(steps, epochs, e.linear_warmup_epochs, e.linear_lr)
    step = 0
    for epoch in range(epochs):
        perm = torch.from_numpy(np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(x)))
        for b in range(steps):
            idx = perm[b * bs : (b + 1) * bs]
            set_lr(opt, schedule(step))
            loss = F.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1

    def classify(clips: torch.Tensor) -> torch.Tensor:
        f = F.normalize(features(clips).float(), dim=-1)
        return head(f)

    with torch.no_grad():
        preds = _predict_dataset(classify, val, cfg, e.test_clips, e.test_crops)
    encoder.train(was_training)
    after = _param_snapshot(encoder)
    for k, v in before.items():
        if not torch.equal(v, after[k]):
            raise RuntimeError(f"linear probe modified frozen encoder tensor {k}")
    return _report("linear", preds, _labels(val), cfg, t0, epochs=epochs, lr=e.linear_lr)


class VideoClassifier(nn.Module):
    def __init__(self, backbone: nn.Module, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.fc = nn.Linear(backbone.out_dim, num_classes)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.fc(self.backbone(clips).mean(dim=1))


def finetune(
    model: nn.Module,
    train: Sequence[VideoRecord],
    val: Sequence[VideoRecord],
    cfg: RunConfig,
    lr: float | None = None,
    epochs: int | None = None,
    protocol: str = "finetune",
) -> tuple[EvalReport, VideoClassifier]:
    """Supervised training of the whole network with momentum SGD.

    ``model`` is either a :class:`VideoClassifier` (training continues from
    it) or a network with a ``backbone`` attribute, which is copied and given
    a fresh linear head. The input model is never modified.
    """
    t0 = time.perf_counter()
    e = cfg.eval
    lr = e.finetune_lr if lr is None else lr
    epochs = e.finetune_epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    if isinstance(model, VideoClassifier):
        clf = copy.deepcopy(model)
    else:
        clf = VideoClassifier(copy.deepcopy(model.backbone), _num_classes(train, val))
    for p in clf.parameters():
        p.requires_grad_(True)
    opt = torch.optim.SGD(clf.parameters(), lr=0.0, momentum=0.9, weight_decay=e.finetune_weight_decay)
    aug = AugConfig(
        resize_short_range=cfg.aug.resize_short_range,
        crop_size=cfg.aug.crop_size,
        hflip_prob=cfg.aug.hflip_prob,
        jitter_prob=0.0,
        grayscale_prob=0.0,
        blur_prob=0.0,
    )
    bs = min(e.finetune_batch_size, len(train))
    steps = len(train) // bs
    schedule = _sgd_schedule(steps, epochs, e.finetune_warmup_epochs, lr)
    T, stride = cfg.encoder.num_frames, cfg.encoder.stride
    step = 0
    for epoch in range(epochs):
        clf.train()
        perm = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(train))
        for b in range(steps):
            batch = [train[i] for i in perm[b * bs : (b + 1) * bs]]
            rngs = [np.random.default_rng([cfg.seed, 12, epoch, b, j]) for j in range(len(batch))]
            clips = torch.stack([augment(sample_clip(v, T, stride, r), aug, r).frames for v, r in zip(batch, rngs)])
            y = torch.tensor([v.label for v in batch])
            set_lr(opt, schedule(step))
            loss = F.cross_entropy(clf(clips), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    clf.eval()
    preds = _predict_dataset(clf, val, cfg, e.test_clips, e.test_crops)
    return _report(protocol, preds, _labels(val), cfg, t0, epochs=epochs, lr=lr, train_videos=len(train)), clf


def evaluate_classifier(clf: VideoClassifier, val: Sequence[VideoRecord], cfg: RunConfig) -> EvalReport:
    t0 = time.perf_counter()
    clf.eval()
    preds = _predict_dataset(clf, val, cfg, cfg.eval.test_clips, cfg.eval.test_crops)
    return _report("classifier", preds, _labels(val), cfg, t0)
