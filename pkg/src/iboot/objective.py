"""Cosine-distance prediction losses.

Predictions ``q`` and targets ``k`` are ``... x T x D`` tensors; a leading
batch dimension is averaged over. Targets are detached on entry.
"""
from __future__ import annotations

import torch

from iboot.config import LossConfig


class CollapsedFeatureError(FloatingPointError):
    """A prediction or target vector has zero norm."""


def cosine_distance(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """2 - 2 cos(q, k) along the last axis, in [0, 4]."""
    qn = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    kn = torch.linalg.vector_norm(k, dim=-1, keepdim=True)
    if bool((qn == 0).any()) or bool((kn == 0).any()):
        raise CollapsedFeatureError("zero-norm vector in cosine distance")
    cos = ((q / qn) * (k / kn)).sum(dim=-1)
    return (2.0 - 2.0 * cos).clamp(0.0, 4.0)


def temporal_pool(features: torch.Tensor) -> torch.Tensor:
    if features.shape[-2] == 0:
        raise ValueError("cannot pool over zero frames")
    return features.mean(dim=-2)


def iboot_loss(q_views: list[torch.Tensor], k_ref: torch.Tensor, temporal_pool_features: bool = True) -> torch.Tensor:
    """Mean over online views of the distance to the (stop-gradient) reference
    features. Pooled: one distance per clip. Per-frame: frame t is matched to
    frame t and distances are averaged over t."""
    if not q_views:
        raise ValueError("need at least one online view")
    k = k_ref.detach()
    per_view = []
    for q in q_views:
        if q.shape != k.shape:
            raise ValueError(f"prediction shape {tuple(q.shape)} != target shape {tuple(k.shape)}")
        if temporal_pool_features:
            d = cosine_distance(temporal_pool(q), temporal_pool(k))
        else:
            d = cosine_distance(q, k).mean(dim=-1)
        per_view.append(d.mean())
    return torch.stack(per_view).mean()


def ensemble_loss(
    q_sets: dict[str, list[torch.Tensor]],
    k_set: dict[str, torch.Tensor],
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sum (or mean, per ``cfg.ensemble_reduce``) of per-target losses."""
    if set(q_sets) != set(k_set):
        raise ValueError(f"prediction targets {sorted(q_sets)} != feature targets {sorted(k_set)}")
    if not k_set:
        raise ValueError("no targets")
    parts = {name: iboot_loss(q_sets[name], k_set[name], cfg.temporal_pool) for name in k_set}
    total = torch.stack(list(parts.values())).sum()
    if cfg.ensemble_reduce == "mean":
        total = total / len(parts)
    return total, parts


def aux_ssl_loss(q_views: list[torch.Tensor], k_momentum: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Same form as :func:`iboot_loss`, against the EMA branch's v_ref features."""
    if not cfg.aux_ssl:
        raise ValueError("aux_ssl_loss called with loss.aux_ssl disabled")
    return iboot_loss(q_views, k_momentum, cfg.temporal_pool)


def total_loss(
    q_sets: dict[str, list[torch.Tensor]],
    k_set: dict[str, torch.Tensor],
    cfg: LossConfig,
    k_momentum: torch.Tensor | None = None,
    q_momentum: list[torch.Tensor] | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full objective and its logged components."""
    loss, parts = ensemble_loss(q_sets, k_set, cfg)
    components = {name: float(v.detach()) for name, v in parts.items()}
    if cfg.aux_ssl:
        if k_momentum is None or q_momentum is None:
            raise ValueError("aux_ssl enabled but no momentum features supplied")
        aux = aux_ssl_loss(q_momentum, k_momentum, cfg)
        components["aux"] = float(aux.detach())
        loss = loss + cfg.aux_weight * aux
    return loss, components
