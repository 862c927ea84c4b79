"""LARS and the linear-warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable

import torch
from torch import nn
from torch.optim.optimizer import Optimizer

from iboot.config import OptimConfig


def base_lr(cfg: OptimConfig) -> float:
    """Linear scaling rule: coefficient * batch_size / 256."""
    return cfg.base_lr_coefficient * cfg.batch_size / 256


def warmup_cosine(step: int, warmup_steps: int, total_steps: int, peak: float, floor: float = 0.0) -> float:
    """Linear ramp 0 -> peak over ``warmup_steps``, then cosine to ``floor``.

    The cosine phase is parameterized so the last step (``total_steps - 1``)
    lands exactly on ``floor``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    p = 1.0 if span <= 0 else (step - warmup_steps) / span
    return max(floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * p)), 0.0)


def lr_at(step: int, steps_per_epoch: int, cfg: OptimConfig) -> float:
    return warmup_cosine(
        step,
        cfg.warmup_epochs * steps_per_epoch,
        cfg.total_epochs * steps_per_epoch,
        base_lr(cfg),
        cfg.final_lr,
    )


def is_excluded(name: str, param: torch.Tensor, patterns: Iterable[str]) -> bool:
    """Biases, normalization parameters and any 1-d tensor skip trust-ratio scaling."""
    return param.ndim <= 1 or any(p in name for p in patterns)


def lars_update(
    w: torch.Tensor,
    g: torch.Tensor,
    buf: torch.Tensor | None,
    lr: float,
    weight_decay: float,
    momentum: float,
    trust_coefficient: float,
    adapt: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One LARS update of a single tensor; returns (new weight, new momentum buffer)."""
    if not torch.isfinite(g).all():
        raise FloatingPointError(f"non-finite gradient (shape {tuple(g.shape)}), step aborted")
    g = g + weight_decay * w
    ratio = 1.0
    if adapt:
        w_norm = torch.linalg.vector_norm(w)
        g_norm = torch.linalg.vector_norm(g)
        if w_norm > 0 and g_norm > 0:
            ratio = trust_coefficient * w_norm / g_norm
    step = ratio * lr * g
    buf = step if buf is None else momentum * buf + step
    return w - buf, buf


class LARS(Optimizer):
    """LARS with per-group ``adapt`` flags (see :func:`lars_param_groups`).

    Per tensor: g' = g + wd*w; r = eta*|w|/|g'| (or 1); u = m*u + r*lr*g'; w -= u.
    """

    def __init__(self, params, lr: float = 0.0, weight_decay: float = 0.0, momentum: float = 0.9, trust_coefficient: float = 0.001):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, trust_coefficient=trust_coefficient, adapt=True)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not torch.isfinite(p.grad).all():
                    raise FloatingPointError(f"non-finite gradient in parameter of shape {tuple(p.shape)}")
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                new_w, buf = lars_update(
                    p,
                    p.grad,
                    state.get("momentum_buffer"),
                    group["lr"],
                    group["weight_decay"],
                    group["momentum"],
                    group["trust_coefficient"],
                    group["adapt"],
                )
                state["momentum_buffer"] = buf
                p.copy_(new_w)
        return loss


def lars_param_groups(model: nn.Module, cfg: OptimConfig) -> list[dict]:
    adapted, excluded = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (excluded if is_excluded(name, p, cfg.exclude_from_adaptation) else adapted).append(p)
    groups = []
    if adapted:
        groups.append({"params": adapted, "adapt": True})
    if excluded:
        groups.append({"params": excluded, "adapt": False})
    return groups


def build_lars(model: nn.Module, cfg: OptimConfig) -> LARS:
    return LARS(
        lars_param_groups(model, cfg),
        lr=0.0,
        weight_decay=cfg.weight_decay,
        momentum=cfg.momentum,
        trust_coefficient=cfg.trust_coefficient,
    )


def set_lr(optimizer: Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
