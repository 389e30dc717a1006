"""Tokenization, rate-controlled shuffling and sinusoidal positions.

Token sequences are tensors of shape ``(L, D)`` or ``(B, L, D)``. Blocks are
traversed row-major over the ``(H/P, W/P)`` grid and flattened in
``(C, P, P)`` order, so :func:`tokenize` and :func:`detokenize` are exact
inverses when the projections are.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

# Incremented on every shuffle; tests use it to prove inference never shuffles.
SHUFFLE_CALLS = 0


def reset_shuffle_counter() -> None:
    global SHUFFLE_CALLS
    SHUFFLE_CALLS = 0


def blockify(fmap: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, L, C*P*P) of non-overlapping blocks."""
    b, c, h, w = fmap.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch {patch} does not divide feature size {h}x{w}")
    gh, gw = h // patch, w // patch
    x = fmap.reshape(b, c, gh, patch, gw, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)  # b, gh, gw, c, p, p
    return x.reshape(b, gh * gw, c * patch * patch)


def unblockify(blocks: torch.Tensor, grid: tuple[int, int], patch: int) -> torch.Tensor:
    """Inverse of :func:`blockify`."""
    b, length, dim = blocks.shape
    gh, gw = grid
    if gh * gw != length or dim % (patch * patch):
        raise ConfigError(f"cannot place {length} blocks of width {dim} on grid {grid} with patch {patch}")
    c = dim // (patch * patch)
    x = blocks.reshape(b, gh, gw, c, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, gh * patch, gw * patch)


class PatchProjection(nn.Module):
    """Trainable affine maps between P x P x C blocks and D-dimensional tokens."""

    def __init__(self, channels: int, patch: int, width: int):
        super().__init__()
        self.channels, self.patch, self.width = channels, patch, width
        block = channels * patch * patch
        self.embed = nn.Linear(block, width)
        self.unembed = nn.Linear(width, block)

    def reset_parameters(self, gen: torch.Generator) -> None:
        # torch's default Linear init range, drawn from an explicit generator
        with torch.no_grad():
            for lin in (self.embed, self.unembed):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)


def tokenize(fmap: torch.Tensor, proj: PatchProjection) -> tuple[torch.Tensor, tuple[int, int]]:
    """Embed each P x P block of a (B, C, H, W) or (C, H, W) map as one token."""
    squeeze = fmap.dim() == 3
    if squeeze:
        fmap = fmap.unsqueeze(0)
    if fmap.shape[1] != proj.channels:
        raise ConfigError(f"feature map has {fmap.shape[1]} channels, projection expects {proj.channels}")
    grid = (fmap.shape[2] // proj.patch, fmap.shape[3] // proj.patch)
    tokens = proj.embed(blockify(fmap, proj.patch))
    return (tokens.squeeze(0) if squeeze else tokens), grid


def detokenize(tokens: torch.Tensor, grid: tuple[int, int], proj: PatchProjection) -> torch.Tensor:
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[-1] != proj.width:
        raise ConfigError(f"token width {tokens.shape[-1]} != projection width {proj.width}")
    fmap = unblockify(proj.unembed(tokens), grid, proj.patch)
    return fmap.squeeze(0) if squeeze else fmap


def positional_table(length: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal table: sin on even columns, cos on odd, frequency 10000^(-2i/D)."""
    if width % 2:
        raise ConfigError(f"positional width must be even, got {width}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(width // 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, 2 * i / width)
    table = torch.empty(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.to(dtype)


def add_positions(tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Add the table by slot, whatever content currently sits in that slot."""
    if tuple(tokens.shape[-2:]) != tuple(table.shape):
        raise ConfigError(f"token shape {tuple(tokens.shape)} does not match table {tuple(table.shape)}")
    return tokens + table.to(tokens.dtype)


@dataclass(frozen=True)
class ShuffleRecord:
    """Everything needed to replay one shuffle.

    ``selected[j]`` receives the token previously at ``sources[j]``; ``sources``
    is a rearrangement of ``selected`` (fixed points allowed).
    """

    tau: float
    length: int
    selected: tuple[int, ...]
    sources: tuple[int, ...]
    seed: int | None = None

    @property
    def num_s(self) -> int:
        return len(self.selected)

    def apply(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] != self.length:
            raise ConfigError(f"record is for length {self.length}, got {tokens.shape[-2]}")
        out = tokens.clone()
        if self.selected:
            out[..., list(self.selected), :] = tokens[..., list(self.sources), :]
        return out

    def to_bytes(self) -> bytes:
        n = len(self.selected)
        return (
            struct.pack("<Bd2I", 1, self.tau, self.length, n)
            + np.asarray(self.selected, dtype="<u4").tobytes()
            + np.asarray(self.sources, dtype="<u4").tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ShuffleRecord":
        try:
            version, tau, length, n = struct.unpack_from("<Bd2I", buf, 0)
        except struct.error as exc:
            raise ConfigError(f"truncated shuffle record: {exc}") from None
        if version != 1:
            raise ConfigError(f"unsupported shuffle record version {version}")
        off = struct.calcsize("<Bd2I")
        if len(buf) != off + 8 * n:
            raise ConfigError("shuffle record payload length mismatch")
        sel = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
        src = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 4 * n)
        return cls(tau, length, tuple(int(v) for v in sel), tuple(int(v) for v in src))


def sample_shuffle(length: int, tau: float, rng) -> ShuffleRecord:
    """Draw a shuffle pattern: pick floor(L*tau) distinct slots, permute them uniformly."""
    if not 0.0 <= tau <= 1.0 or math.isnan(tau):
        raise ConfigError(f"shuffling rate must lie in [0, 1], got {tau}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    # The small offset absorbs binary representation error, so decimal rates
    # count as written (5 * 0.6 -> 3, 100 * 0.29 -> 29).
    num_s = min(length, math.floor(length * tau + 1e-9))
    selected = rng.permutation(length)[:num_s]
    sources = selected[rng.permutation(num_s)]
    return ShuffleRecord(
        float(tau), length, tuple(int(v) for v in selected), tuple(int(v) for v in sources), seed
    )


def random_shuffle(tokens: torch.Tensor, tau: float, rng) -> tuple[torch.Tensor, ShuffleRecord]:
    """Shuffle a sequence (or a whole batch with one shared pattern)."""
    global SHUFFLE_CALLS
    SHUFFLE_CALLS += 1
    record = sample_shuffle(tokens.shape[-2], tau, rng)
    return record.apply(tokens), record


def random_shuffle_per_sample(tokens: torch.Tensor, tau: float, rng) -> tuple[torch.Tensor, list[ShuffleRecord]]:
    """Independent pattern for every batch member of a (B, L, D) tensor."""
    global SHUFFLE_CALLS
    SHUFFLE_CALLS += 1
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    records = [sample_shuffle(tokens.shape[-2], tau, rng) for _ in range(tokens.shape[0])]
    out = torch.stack([r.apply(t) for r, t in zip(records, tokens)])
    return out, records
