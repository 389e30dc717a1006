"""Pre-norm transformer restoration network with inspectable attention."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class Block(nn.Module):
    """``x + MSA(LN(x))`` followed by ``x + MLP(LN(x))``."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.heads = heads
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, length, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, length, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.proj(out), attn

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        msa, attn = self.attention(self.norm1(x))
        x = x + msa
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


class RestorationNet(nn.Module):
    def __init__(self, depth: int, width: int, heads: int, mlp_ratio: float = 4.0, seed: int = 0):
        super().__init__()
        if heads <= 0 or width % heads:
            raise ConfigError(f"width {width} is not divisible by heads {heads}")
        if depth < 0:
            raise ConfigError("depth must be non-negative")
        self.depth, self.width, self.heads, self.mlp_ratio = depth, width, heads, mlp_ratio
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio) for _ in range(depth))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        out_std = 0.02 / math.sqrt(2 * max(self.depth, 1))
        with torch.no_grad():
            for block in self.blocks:
                for name, lin in (("qkv", block.qkv), ("proj", block.proj), ("fc1", block.fc1), ("fc2", block.fc2)):
                    std = out_std if name in ("proj", "fc2") else 0.02
                    nn.init.trunc_normal_(lin.weight, std=std, a=-2 * std, b=2 * std, generator=gen)
                    lin.bias.zero_()
                for ln in (block.norm1, block.norm2):
                    ln.weight.fill_(1.0)
                    ln.bias.zero_()

    def forward(self, x: torch.Tensor, trace: bool = False):
        return restore(x, self, trace=trace)


def init_params(depth: int, width: int, heads: int, mlp_ratio: float = 4.0, seed: int = 0) -> RestorationNet:
    return RestorationNet(depth, width, heads, mlp_ratio, seed)


def param_count(depth: int, width: int, mlp_ratio: float = 4.0) -> int:
    """Closed form: per block 4D^2 + 2DH + 9D + H with H = int(D * mlp_ratio)."""
    d, h = width, int(width * mlp_ratio)
    return depth * (4 * d * d + 2 * d * h + 9 * d + h)


def block_forward(x: torch.Tensor, block: Block) -> tuple[torch.Tensor, torch.Tensor]:
    squeeze = x.dim() == 2
    out, attn = block(x.unsqueeze(0) if squeeze else x)
    return (out.squeeze(0), attn.squeeze(0)) if squeeze else (out, attn)


def restore(x: torch.Tensor, net: RestorationNet, trace: bool = False):
    """Apply all blocks. Returns ``(tokens, attention)`` where attention is a list
    of per-block ``(B, heads, L, L)`` tensors, or ``None`` unless ``trace``."""
    if x.shape[-1] != net.width:
        raise ConfigError(f"token width {x.shape[-1]} != network width {net.width}")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    attns = [] if trace else None
    for block in net.blocks:
        x, attn = block(x)
        if trace:
            attns.append(attn.detach().squeeze(0) if squeeze else attn.detach())
    return (x.squeeze(0) if squeeze else x), attns


def zero_output_projections(net: RestorationNet) -> RestorationNet:
    """Zero the attention-output and MLP-output layers, making every block the identity."""
    with torch.no_grad():
        for block in net.blocks:
            for lin in (block.proj, block.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
    return net
