"""The trainable part of FSR: patch projections, positions and the restoration net."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .core import (
    PatchProjection,
    add_positions,
    detokenize,
    positional_table,
    random_shuffle,
    random_shuffle_per_sample,
    tokenize,
)
from .restoration import RestorationNet


class FSRModel(nn.Module):
    def __init__(
        self,
        channels: int,
        feature_size: int,
        patch: int = 4,
        depth: int = 8,
        width: int = 768,
        heads: int = 12,
        mlp_ratio: float = 4.0,
        pos_embed: str = "sinusoidal",
        seed: int = 1,
    ):
        super().__init__()
        self.proj = PatchProjection(channels, patch, width)
        self.proj.reset_parameters(torch.Generator().manual_seed(seed + 7919))
        self.net = RestorationNet(depth, width, heads, mlp_ratio, seed=seed)
        self.grid = (feature_size // patch, feature_size // patch)
        length = self.grid[0] * self.grid[1]
        self.pos_embed = pos_embed
        table = positional_table(length, width)
        if pos_embed == "learnable":
            self.pos = nn.Parameter(table.clone())
        else:
            self.register_buffer("pos", table if pos_embed == "sinusoidal" else torch.zeros_like(table), persistent=False)

    @classmethod
    def from_config(cls, cfg, channels: int) -> "FSRModel":
        return cls(
            channels,
            cfg.feature_size,
            cfg.patch,
            cfg.depth,
            cfg.width,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.pos_embed,
            cfg.seed,
        )

    @property
    def length(self) -> int:
        return self.grid[0] * self.grid[1]

    def forward(
        self,
        fmap: torch.Tensor,
        tau: float = 0.0,
        rng: np.random.Generator | None = None,
        per_sample: bool = False,
        trace: bool = False,
    ):
        """Restore a (B, C, H, W) feature map.

        With ``tau > 0`` the tokens are shuffled first (training). Inference
        passes ``tau=0`` and never touches the shuffler. Returns
        ``(restored_map, attention_or_None)``.
        """
        tokens, grid = tokenize(fmap, self.proj)
        if tau > 0:
            if rng is None:
                raise ValueError("shuffling requires an rng")
            shuffle = random_shuffle_per_sample if per_sample and tokens.dim() == 3 else random_shuffle
            tokens, _ = shuffle(tokens, tau, rng)
        tokens = add_positions(tokens, self.pos)
        restored, attn = self.net(tokens, trace=trace)
        return detokenize(restored, grid, self.proj), attn
