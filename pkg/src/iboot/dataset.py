"""Synthetic motion videos, temporal clip sampling and view construction."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

# (|vx|, vy) in pixels per raw frame. Classes are keyed on |vx| because the
# horizontal flip augmentation mirrors vx; the sign is drawn per video.
_ABS_VX = (0.0, 0.5, 0.25, 0.75, 1.0)
_VY = (0.0, 0.5, -0.5, 0.25, -0.25)
MOTION_PROGRAMS: tuple[tuple[float, float], ...] = tuple((ax, vy) for ax in _ABS_VX for vy in _VY)


@dataclass(frozen=True)
class VideoRecord:
    id: str
    frames: np.ndarray  # N x H x W x 3, uint8
    label: int | None = None
    split: str = "train"

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Clip:
    frames: torch.Tensor  # T x h x w x 3, float in [0, 1]
    source_id: str
    start: int
    stride: int

    @property
    def indices(self) -> list[int]:
        return [self.start + t * self.stride for t in range(self.frames.shape[0])]


@dataclass
class ViewSet:
    v_ref: Clip
    online_views: list[Clip] = field(default_factory=list)
    source_id: str = ""


def clip_span(T: int, stride: int) -> int:
    return (T - 1) * stride + 1


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.uniform(0.15, 0.55, size=(1, 3, 4, 4)).astype(np.float32))
    bg = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    bg = bg[0].permute(1, 2, 0).numpy()
    return bg + rng.uniform(-0.05, 0.05, size=bg.shape).astype(np.float32)


def _render_video(rng: np.random.Generator, program: tuple[float, float], n: int, size: int) -> np.ndarray:
    abs_vx, vy = program
    vx = abs_vx * rng.choice((-1.0, 1.0))
    side = max(2, size // 4)
    bg = _smooth_background(rng, size)
    color = rng.uniform(0.65, 1.0, size=3).astype(np.float32)
    color[rng.integers(3)] *= 0.3  # saturated, clearly off the background
    x0, y0 = rng.uniform(0, size, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    for t in range(n):
        x = int(np.floor(x0 + vx * t)) % size
        y = int(np.floor(y0 + vy * t)) % size
        mask = (((xx - x) % size) < side) & (((yy - y) % size) < side)
        img = bg.copy()
        img[mask] = color
        img = img + rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
        frames[t] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return frames


def make_synthetic_dataset(
    num_classes: int,
    videos_per_class: int,
    raw_frames: int,
    spatial_size: int,
    seed: int,
    val_fraction: float = 0.25,
    min_raw_frames: int = 1,
) -> list[VideoRecord]:
    """Generate a labelled corpus where each class is one motion program.

    A colored square of random color and position translates with a
    class-specific velocity (wrapping at the borders) over a static smooth
    noise background, so single frames carry no class information.
    The last ``round(val_fraction * videos_per_class)`` videos of each class
    form the ``val`` split.
    """
    if min(num_classes, videos_per_class, raw_frames, spatial_size) < 1:
        raise ValueError("all dataset sizes must be >= 1")
    if num_classes > len(MOTION_PROGRAMS):
        raise ValueError(f"at most {len(MOTION_PROGRAMS)} motion classes are defined")
    if raw_frames < min_raw_frames:
        raise ValueError(f"raw_frames={raw_frames} is shorter than the configured clip span {min_raw_frames}")
    n_val = int(round(val_fraction * videos_per_class))
    records = []
    for c in range(num_classes):
        for i in range(videos_per_class):
            rng = np.random.default_rng([seed, c, i])
            frames = _render_video(rng, MOTION_PROGRAMS[c], raw_frames, spatial_size)
            frames.setflags(write=False)
            split = "val" if i >= videos_per_class - n_val else "train"
            records.append(VideoRecord(id=f"c{c:02d}_v{i:04d}", frames=frames, label=c, split=split))
    return records


def split(records: list[VideoRecord], name: str) -> list[VideoRecord]:
    return [r for r in records if r.split == name]


def read_clip(video: VideoRecord, T: int, stride: int, start: int) -> Clip:
    span = clip_span(T, stride)
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    if not 0 <= start <= video.num_frames - span:
        raise ValueError(
            f"window start={start}, span={span} does not fit video {video.id} with {video.num_frames} frames"
        )
    raw = video.frames[start : start + span : stride]
    frames = torch.from_numpy(raw.astype(np.float32) / 255.0)
    return Clip(frames=frames, source_id=video.id, start=start, stride=stride)


def sample_clip(video: VideoRecord, T: int, stride: int, rng: np.random.Generator) -> Clip:
    span = clip_span(T, stride)
    if video.num_frames < span:
        raise ValueError(f"video {video.id} has {video.num_frames} frames, needs {span} for T={T}, stride={stride}")
    start = int(rng.integers(0, video.num_frames - span + 1))
    return read_clip(video, T, stride, start)


def sample_views(
    video: VideoRecord,
    num_online_views: int,
    T: int,
    stride: int,
    rng: np.random.Generator,
    ref_sampling: str = "independent",
) -> ViewSet:
    """Draw v_ref plus ``num_online_views`` independently sampled online clips.

    ``num_online_views=0`` reuses v_ref as the single online view; spatial
    augmentation is still drawn separately for each consumer.
    """
    if num_online_views not in (0, 1, 2):
        raise ValueError(f"num_online_views must be 0, 1 or 2, got {num_online_views}")
    if ref_sampling == "anchored":
        span = clip_span(T, stride)
        if video.num_frames < span:
            raise ValueError(f"video {video.id} too short for T={T}, stride={stride}")
        v_ref = read_clip(video, T, stride, (video.num_frames - span) // 2)
    elif ref_sampling == "independent":
        v_ref = sample_clip(video, T, stride, rng)
    else:
        raise ValueError(f"unknown ref_sampling {ref_sampling!r}")
    if num_online_views == 0:
        online = [v_ref]
    else:
        online = [sample_clip(video, T, stride, rng) for _ in range(num_online_views)]
    return ViewSet(v_ref=v_ref, online_views=online, source_id=video.id)


def save_dataset(records: list[VideoRecord], path: str | Path) -> None:
    manifest = [
        {"id": r.id, "label": r.label, "split": r.split, "shape": list(r.frames.shape)} for r in records
    ]
    arrays = {f"frames_{i}": r.frames for i, r in enumerate(records)}
    buf = io.BytesIO()
    np.savez(buf, manifest=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path: str | Path) -> list[VideoRecord]:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(z["manifest"].tobytes().decode())
        records = []
        for i, m in enumerate(manifest):
            frames = z[f"frames_{i}"]
            if list(frames.shape) != m["shape"] or frames.dtype != np.uint8:
                raise ValueError(f"corrupt frame blob for {m['id']}")
            frames.setflags(write=False)
            records.append(VideoRecord(id=m["id"], frames=frames, label=m["label"], split=m["split"]))
    return records
