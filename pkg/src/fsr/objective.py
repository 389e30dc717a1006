"""Restoration loss: local squared error, local cosine and global cosine terms.

Maps are ``(C, H, W)`` or ``(B, C, H, W)``; batch terms are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

EPS = 1e-8


@dataclass
class LossBreakdown:
    local_mse: torch.Tensor
    local_cos: torch.Tensor
    global_cos: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "local_mse": float(self.local_mse.detach()),
            "local_cos": float(self.local_cos.detach()),
            "global_cos": float(self.global_cos.detach()),
            "total": float(self.total.detach()),
        }


def _prepare(target, restored):
    if target.shape != restored.shape:
        raise ConfigError(f"shape mismatch: {tuple(target.shape)} vs {tuple(restored.shape)}")
    if target.dim() == 3:
        target, restored = target.unsqueeze(0), restored.unsqueeze(0)
    if target.dim() != 4:
        raise ConfigError("expected (C, H, W) or (B, C, H, W) maps")
    # at least float32 accumulation
    dtype = torch.promote_types(target.dtype, torch.float32)
    return target.to(dtype), restored.to(dtype)


def position_sq_error(target: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    """Per-position squared L2 distance over channels: (B, H, W)."""
    return (target - restored).pow(2).sum(dim=1)


def position_cos_distance(target: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    """Per-position ``1 - cos`` between channel vectors: (B, H, W)."""
    dot = (target * restored).sum(dim=1)
    denom = target.norm(dim=1) * restored.norm(dim=1) + EPS
    return 1.0 - dot / denom


def local_mse(target, restored) -> torch.Tensor:
    t, r = _prepare(target, restored)
    return position_sq_error(t, r).mean()


def local_cos(target, restored) -> torch.Tensor:
    t, r = _prepare(target, restored)
    return position_cos_distance(t, r).mean()


def global_cos(target, restored) -> torch.Tensor:
    t, r = _prepare(target, restored)
    t, r = t.flatten(1), r.flatten(1)
    cos = (t * r).sum(1) / (t.norm(dim=1) * r.norm(dim=1) + EPS)
    return (1.0 - cos).mean()


def restoration_loss(target, restored) -> LossBreakdown:
    mse = local_mse(target, restored)
    lcos = local_cos(target, restored)
    gcos = global_cos(target, restored)
    return LossBreakdown(mse, lcos, gcos, mse + lcos + gcos)
