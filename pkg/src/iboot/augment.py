"""Clip-consistent spatial augmentation.

Parameters are drawn once per clip and applied identically to every frame.
Fixed operation order: resize -> crop -> flip -> jitter (brightness,
contrast, saturation, hue) -> grayscale -> blur.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from iboot.config import AugConfig
from iboot.dataset import Clip

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugParams:
    resize_short: int
    crop_box: tuple[int, int, int, int]  # top, left, height, width
    flip: bool = False
    apply_jitter: bool = False
    jitter_factors: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.0)
    apply_gray: bool = False
    blur_sigma: float | None = None


def resized_shape(frame_shape: tuple[int, int], short: int) -> tuple[int, int]:
    h, w = frame_shape
    if h <= w:
        return short, max(short, int(round(w * short / h)))
    return max(short, int(round(h * short / w))), short


def draw_aug_params(cfg: AugConfig, frame_shape: tuple[int, int], rng: np.random.Generator) -> AugParams:
    """One parameter draw per clip. Every field is drawn unconditionally so the
    rng stream advances by the same amount regardless of the coin flips."""
    lo, hi = cfg.resize_short_range
    if cfg.crop_size > lo:
        raise ValueError(f"crop_size {cfg.crop_size} cannot fit a frame resized to {lo}")
    short = int(rng.integers(lo, hi + 1))
    rh, rw = resized_shape(frame_shape, short)
    top = int(rng.integers(0, rh - cfg.crop_size + 1))
    left = int(rng.integers(0, rw - cfg.crop_size + 1))
    flip = bool(rng.random() < cfg.hflip_prob)
    apply_jitter = bool(rng.random() < cfg.jitter_prob)
    sb, sc, ss, sh = cfg.jitter_strengths
    factors = (
        float(rng.uniform(1 - sb, 1 + sb)),
        float(rng.uniform(1 - sc, 1 + sc)),
        float(rng.uniform(1 - ss, 1 + ss)),
        float(rng.uniform(-sh, sh)),
    )
    apply_gray = bool(rng.random() < cfg.grayscale_prob)
    apply_blur = bool(rng.random() < cfg.blur_prob)
    sigma = float(rng.uniform(*cfg.blur_sigma_range))
    return AugParams(
        resize_short=short,
        crop_box=(top, left, cfg.crop_size, cfg.crop_size),
        flip=flip,
        apply_jitter=apply_jitter,
        jitter_factors=factors,
        apply_gray=apply_gray,
        blur_sigma=sigma if apply_blur else None,
    )


def grayscale(x: torch.Tensor) -> torch.Tensor:
    """Luminance of channels-first frames (..., 3, H, W), kept as one channel."""
    return LUMA[0] * x[..., 0:1, :, :] + LUMA[1] * x[..., 1:2, :, :] + LUMA[2] * x[..., 2:3, :, :]


def _rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(dim=-3)
    maxc = torch.max(x, dim=-3).values
    minc = torch.min(x, dim=-3).values
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / torch.where(maxc > 0, maxc, torch.ones_like(maxc)), torch.zeros_like(maxc))
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return torch.stack((h, s, maxc), dim=-3)


def _hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x.unbind(dim=-3)
    h6 = h * 6.0
    i = torch.floor(h6)
    f = h6 - i
    i = i.to(torch.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = torch.stack(
        (
            torch.stack((v, q, p, p, t, v), dim=-3),
            torch.stack((t, v, v, q, p, p), dim=-3),
            torch.stack((p, p, t, v, v, q), dim=-3),
        ),
        dim=-4,
    )  # (..., 3 channels, 6 sectors, H, W)
    idx = i.unsqueeze(-3).unsqueeze(-3).expand(*table.shape[:-3], 1, *i.shape[-2:])
    return torch.gather(table, -3, idx).squeeze(-3)


def color_jitter(frame: torch.Tensor, factors: tuple[float, float, float, float]) -> torch.Tensor:
    """Channels-first frames (..., 3, H, W) in [0, 1]; clamped once at the end."""
    b, c, s, h = factors
    x = frame * b
    mean = grayscale(x).mean(dim=(-3, -2, -1), keepdim=True)
    x = c * x + (1.0 - c) * mean
    x = s * x + (1.0 - s) * grayscale(x)
    if h != 0.0:
        hsv = _rgb_to_hsv(x)
        hue = (hsv[..., 0, :, :] + h) % 1.0
        x = _hsv_to_rgb(torch.stack((hue, hsv[..., 1, :, :], hsv[..., 2, :, :]), dim=-3))
    return x.clamp(0.0, 1.0)


def gaussian_kernel1d(sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if not sigma > 0:
        raise ValueError(f"blur sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(frame: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable blur of channels-first frames (..., C, H, W) with reflect padding."""
    k = gaussian_kernel1d(sigma, frame.dtype)
    r = (k.numel() - 1) // 2
    lead = frame.shape[:-3]
    c, hgt, wid = frame.shape[-3:]
    x = frame.reshape(-1, c, hgt, wid)
    if r >= min(hgt, wid):
        raise ValueError(f"blur radius {r} too large for a {hgt}x{wid} frame")
    x = F.pad(x, (r, r, r, r), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x.reshape(*lead, c, hgt, wid)


def apply_aug_frames(x: torch.Tensor, params: AugParams) -> torch.Tensor:
    """Augment channels-first frames (T, 3, H, W)."""
    h, w = x.shape[-2:]
    rh, rw = resized_shape((h, w), params.resize_short)
    if (rh, rw) != (h, w):
        x = F.interpolate(x, size=(rh, rw), mode="bilinear", align_corners=False)
    top, left, ch, cw = params.crop_box
    if top < 0 or left < 0 or top + ch > rh or left + cw > rw:
        raise ValueError(f"crop box {params.crop_box} outside the {rh}x{rw} resized frame")
    x = x[..., top : top + ch, left : left + cw]
    if params.flip:
        x = x.flip(-1)
    if params.apply_jitter:
        x = color_jitter(x, params.jitter_factors)
    if params.apply_gray:
        x = grayscale(x).expand_as(x)
    if params.blur_sigma is not None:
        x = gaussian_blur(x, params.blur_sigma)
    return x.clamp(0.0, 1.0).contiguous()


def apply_aug(clip: Clip, params: AugParams) -> Clip:
    x = clip.frames.permute(0, 3, 1, 2)
    out = apply_aug_frames(x, params).permute(0, 2, 3, 1).contiguous()
    return replace(clip, frames=out)


def augment(clip: Clip, cfg: AugConfig, rng: np.random.Generator) -> Clip:
    params = draw_aug_params(cfg, tuple(clip.frames.shape[1:3]), rng)
    return apply_aug(clip, params)


def eval_params(frame_shape: tuple[int, int], short: int, crop_size: int, position: str = "center") -> AugParams:
    """Deterministic test-time view: short-side resize, then a left/center/right
    crop along the longer side (the width when the frame is square)."""
    rh, rw = resized_shape(frame_shape, short)
    if crop_size > min(rh, rw):
        raise ValueError(f"crop {crop_size} does not fit a {rh}x{rw} frame")
    frac = {"left": 0.0, "center": 0.5, "right": 1.0}[position]
    if rh > rw:
        top, left = int(round((rh - crop_size) * frac)), (rw - crop_size) // 2
    else:
        top, left = (rh - crop_size) // 2, int(round((rw - crop_size) * frac))
    return AugParams(resize_short=short, crop_box=(top, left, crop_size, crop_size))


CROP_POSITIONS = {1: ("center",), 3: ("left", "center", "right")}
