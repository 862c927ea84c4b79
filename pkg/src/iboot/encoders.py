"""Online video network, frozen per-frame target adapters and the EMA branch.

All networks take channels-last clip batches ``B x T x H x W x 3`` in [0, 1]
and return one feature vector per frame, ``B x T x D``.
"""
from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from iboot.config import EncoderConfig, TargetConfig
from iboot.dataset import Clip

PIXEL_MEAN = 0.45
PIXEL_STD = 0.225


def _to_channels_first(clips: torch.Tensor) -> torch.Tensor:
    if clips.ndim != 5 or clips.shape[-1] != 3:
        raise ValueError(f"expected B x T x H x W x 3 clips, got shape {tuple(clips.shape)}")
    return ((clips - PIXEL_MEAN) / PIXEL_STD).permute(0, 4, 1, 2, 3)


class VideoEncoder(nn.Module):
    """Stack of 3-D conv blocks, stride 1 in time, followed by spatial mean
    pooling. Emits one feature per input frame."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64), temporal_kernel: int = 3):
        super().__init__()
        self.widths = tuple(widths)
        self.temporal_kernel = temporal_kernel
        blocks = []
        cin = 3
        for i, cout in enumerate(widths):
            spatial_stride = 1 if i == 0 else 2
            blocks.append(
                nn.ModuleDict(
                    {
                        "conv": nn.Conv3d(
                            cin,
                            cout,
                            kernel_size=(temporal_kernel, 3, 3),
                            stride=(1, spatial_stride, spatial_stride),
                            padding=(temporal_kernel // 2, 1, 1),
                            padding_mode="replicate",
                            bias=False,
                        ),
                        "bn": nn.BatchNorm3d(cout),
                    }
                )
            )
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = cin

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        x = _to_channels_first(clips)
        for block in self.blocks:
            x = F.relu(block["bn"](block["conv"](x)))
        return x.mean(dim=(-2, -1)).transpose(1, 2)  # B x T x C


class ImageEncoder2d(nn.Module):
    """Per-frame 2-D twin of :class:`VideoEncoder` with identical parameter
    names; the source of weights for inflation."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        blocks = []
        cin = 3
        for i, cout in enumerate(widths):
            s = 1 if i == 0 else 2
            blocks.append(
                nn.ModuleDict(
                    {
                        "conv": nn.Conv2d(cin, cout, 3, stride=s, padding=1, padding_mode="replicate", bias=False),
                        "bn": nn.BatchNorm2d(cout),
                    }
                )
            )
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = cin

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = ((images - PIXEL_MEAN) / PIXEL_STD).permute(0, 3, 1, 2)
        for block in self.blocks:
            x = F.relu(block["bn"](block["conv"](x)))
        return x.mean(dim=(-2, -1))


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


def _per_frame(head: nn.Module, x: torch.Tensor) -> torch.Tensor:
    b, t, d = x.shape
    return head(x.reshape(b * t, d)).reshape(b, t, -1)


class OnlineNetwork(nn.Module):
    """Video encoder -> projector -> one predictor head per target.

    ``target_dims`` maps target name to its feature width; the reserved name
    ``"momentum"`` adds a head predicting the EMA branch's projector output.
    Without predictors (``use_predictor=False``) the projector must already
    emit the target width.
    """

    def __init__(self, cfg: EncoderConfig, target_dims: dict[str, int]):
        super().__init__()
        self.backbone = VideoEncoder(cfg.widths, cfg.temporal_kernel)
        self.projector = mlp(self.backbone.out_dim, cfg.proj_hidden, cfg.proj_dim)
        self.use_predictor = cfg.use_predictor
        if cfg.use_predictor:
            self.heads = nn.ModuleDict(
                {name: mlp(cfg.proj_dim, cfg.pred_hidden, dim) for name, dim in target_dims.items()}
            )
        else:
            bad = {n: d for n, d in target_dims.items() if d != cfg.proj_dim}
            if bad:
                raise ValueError(f"without predictors every target must have width {cfg.proj_dim}: {bad}")
            self.heads = nn.ModuleDict()
        self.target_names = list(target_dims)

    def forward(self, clips: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        z = _per_frame(self.projector, self.backbone(clips))
        if self.use_predictor:
            preds = {name: _per_frame(head, z) for name, head in self.heads.items()}
        else:
            preds = {name: z for name in self.target_names}
        return z, preds

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        """Temporally pooled backbone features used by the evaluation probes."""
        return self.backbone(clips).mean(dim=1)


def encode_online(model: OnlineNetwork, clip: Clip) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Single-clip view of :meth:`OnlineNetwork.forward`: (T x D_proj, {name: T x D_tgt})."""
    z, preds = model(clip.frames.unsqueeze(0))
    return z[0], {k: v[0] for k, v in preds.items()}


class MomentumBranch(nn.Module):
    """EMA copy of the online backbone + projector. Never receives gradients."""

    def __init__(self, online: OnlineNetwork):
        super().__init__()
        self.backbone = copy.deepcopy(online.backbone)
        self.projector = copy.deepcopy(online.projector)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return _per_frame(self.projector, self.backbone(clips))


@torch.no_grad()
def ema_update(momentum_branch: nn.Module, online: nn.Module, m: float) -> None:
    """theta_m <- m * theta_m + (1 - m) * theta for every mirrored parameter;
    normalization buffers are copied."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum {m} outside [0, 1]")
    online_params = dict(online.named_parameters())
    online_bufs = dict(online.named_buffers())
    for name, p_m in momentum_branch.named_parameters():
        p = online_params.get(name)
        if p is None or p.shape != p_m.shape:
            raise ValueError(f"momentum parameter {name} has no same-shaped online counterpart")
        p_m.mul_(m).add_(p, alpha=1.0 - m)
    for name, b_m in momentum_branch.named_buffers():
        b = online_bufs.get(name)
        if b is None or b.shape != b_m.shape:
            raise ValueError(f"momentum buffer {name} has no same-shaped online counterpart")
        b_m.copy_(b)


@torch.no_grad()
def init_from_inflation(encoder: VideoEncoder, image_weights: dict[str, torch.Tensor]) -> VideoEncoder:
    """Load 2-D weights into the 3-D encoder. Conv kernels are replicated over
    the temporal extent and divided by it; other tensors are copied."""
    state = encoder.state_dict()
    missing = set(state) - set(image_weights)
    if missing:
        raise ValueError(f"image weights lack {sorted(missing)}")
    for name, target in state.items():
        w = image_weights[name]
        if target.ndim == 5:
            kt = target.shape[2]
            if w.ndim != 4 or w.shape != target.shape[:2] + target.shape[3:]:
                raise ValueError(f"{name}: cannot inflate {tuple(w.shape)} into {tuple(target.shape)}")
            target.copy_(w.unsqueeze(2).expand_as(target) / kt)
        else:
            if w.shape != target.shape:
                raise ValueError(f"{name}: shape {tuple(w.shape)} != {tuple(target.shape)}")
            target.copy_(w)
    return encoder


class TargetAdapter(nn.Module):
    """Frozen per-frame image model. Subclasses implement :meth:`encode_frames`."""

    name: str
    output_dim: int

    def __init__(self, name: str, output_dim: int):
        super().__init__()
        self.name = name
        self.output_dim = output_dim

    def encode_frames(self, clips: torch.Tensor, meta: list[Clip]) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def forward(self, clips: torch.Tensor, meta: list[Clip]) -> torch.Tensor:
        if clips.ndim != 5 or clips.shape[-1] != 3 or len(meta) != clips.shape[0]:
            raise ValueError(f"target {self.name}: bad clip batch {tuple(clips.shape)} for {len(meta)} clips")
        out = self.encode_frames(clips, meta)
        return out.detach()


class RandomProjectionTarget(TargetAdapter):
    """Patch-flatten -> fixed random linear map -> tanh -> patch mean -> fixed
    linear map. Weights are buffers, so nothing here is trainable."""

    def __init__(self, name: str, output_dim: int, patch_size: int = 4, hidden_dim: int = 256, seed: int = 0):
        super().__init__(name, output_dim)
        g = torch.Generator().manual_seed(seed)
        self.patch_size = patch_size
        in_dim = patch_size * patch_size * 3
        self.register_buffer("w1", torch.randn(in_dim, hidden_dim, generator=g) / in_dim**0.5)
        self.register_buffer("b1", torch.randn(hidden_dim, generator=g) * 0.1)
        self.register_buffer("w2", torch.randn(hidden_dim, output_dim, generator=g) / hidden_dim**0.5)

    def encode_frames(self, clips, meta):
        b, t, h, w, _ = clips.shape
        p = self.patch_size
        x = clips[:, :, : h - h % p, : w - w % p, :] - 0.5
        x = x.reshape(b, t, h // p, p, w // p, p, 3).permute(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(b, t, -1, p * p * 3)
        hidden = torch.tanh(x @ self.w1 + self.b1).mean(dim=2)
        return hidden @ self.w2


def _frame_seed(frame: torch.Tensor) -> int:
    digest = hashlib.blake2b(frame.contiguous().numpy().tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class OracleTarget(TargetAdapter):
    """Test fixture: emits the anchor direction of the clip's class plus small
    noise seeded by the frame content. It reads the label from a lookup keyed
    by source id, so it is an upper bound on target quality, not an image model."""

    def __init__(self, name: str, output_dim: int, labels: dict[str, int], num_classes: int, noise: float = 0.05, seed: int = 0):
        super().__init__(name, output_dim)
        g = torch.Generator().manual_seed(seed)
        anchors = torch.randn(num_classes, output_dim, generator=g)
        self.register_buffer("anchors", F.normalize(anchors, dim=1))
        self.labels = dict(labels)
        self.noise = noise

    def encode_frames(self, clips, meta):
        b, t = clips.shape[:2]
        out = torch.empty(b, t, self.output_dim)
        for i, clip in enumerate(meta):
            anchor = self.anchors[self.labels[clip.source_id]]
            for j in range(t):
                rng = np.random.default_rng(_frame_seed(clips[i, j]))
                n = torch.from_numpy(rng.standard_normal(self.output_dim).astype(np.float32))
                out[i, j] = anchor + self.noise * n / self.output_dim**0.5
        return out


class FeatureFileTarget(TargetAdapter):
    """Precomputed per-raw-frame features (``.npz``: one ``N x D`` array per
    video id). Rows are read at the clip's raw frame indices; spatial
    augmentation is not reflected in exported features."""

    def __init__(self, name: str, path: str | Path):
        with np.load(path, allow_pickle=False) as z:
            table = {k: torch.from_numpy(z[k].astype(np.float32)) for k in z.files}
        if not table:
            raise ValueError(f"feature file {path} is empty")
        dims = {v.shape[1] for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"feature file {path} mixes widths {dims}")
        super().__init__(name, dims.pop())
        self.table = table

    def encode_frames(self, clips, meta):
        rows = []
        for clip in meta:
            feats = self.table.get(clip.source_id)
            if feats is None:
                raise KeyError(f"feature file has no entry for {clip.source_id}")
            rows.append(feats[clip.indices])
        return torch.stack(rows)


def build_target(cfg: TargetConfig, labels: dict[str, int] | None = None, num_classes: int = 0) -> TargetAdapter:
    if cfg.kind == "oracle":
        if labels is None:
            raise ValueError("the oracle target needs the dataset labels")
        adapter = OracleTarget(cfg.name, cfg.output_dim, labels, num_classes, noise=cfg.noise, seed=cfg.seed)
    elif cfg.kind == "random-projection":
        adapter = RandomProjectionTarget(cfg.name, cfg.output_dim, cfg.patch_size, cfg.hidden_dim, cfg.seed)
    elif cfg.kind == "feature-file":
        adapter = FeatureFileTarget(cfg.name, cfg.path)
    else:
        raise ValueError(f"unknown target kind {cfg.kind!r}")
    return adapter.eval()


def encode_target(adapter: TargetAdapter, clip: Clip) -> torch.Tensor:
    return adapter(clip.frames.unsqueeze(0), [clip])[0]
