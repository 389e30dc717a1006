"""Frozen multi-scale feature extractors, channel fusion and the FSRF cache file."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CacheError, ConfigError


class FeatureExtractor(nn.Module):
    """Base class: a frozen backbone exposing a list of stages.

    Subclasses implement ``_forward_stages`` returning every stage output;
    ``stage_channels`` and ``stage_strides`` describe them.
    """

    descriptor: str = ""
    stage_channels: tuple[int, ...] = ()
    stage_strides: tuple[int, ...] = ()

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # Always stays in inference mode (batch-norm statistics are frozen too).
        return super().train(False)

    def _forward_stages(self, x: torch.Tensor, upto: int) -> list[torch.Tensor]:
        raise NotImplementedError


class SyntheticBackbone(FeatureExtractor):
    """Seeded random strided convolutions with tanh, one block per stage."""

    def __init__(self, seed: int, stage_spec: Sequence[tuple[int, int]], in_channels: int = 3):
        super().__init__()
        if not stage_spec:
            raise ConfigError("synthetic backbone needs at least one stage")
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        prev_c, prev_s = in_channels, 1
        for channels, stride in stage_spec:
            if channels <= 0 or stride <= 0 or stride % prev_s:
                raise ConfigError(f"invalid stage (channels={channels}, stride={stride})")
            ratio = stride // prev_s
            # kernel ratio+2 with padding 1 maps H to exactly H/ratio and covers every pixel
            conv = nn.Conv2d(prev_c, channels, kernel_size=ratio + 2, stride=ratio, padding=1)
            fan_in = prev_c * (ratio + 2) ** 2
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (1.5 / fan_in**0.5))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            blocks.append(conv)
            prev_c, prev_s = channels, stride
        self.blocks = nn.ModuleList(blocks)
        self.stage_channels = tuple(c for c, _ in stage_spec)
        self.stage_strides = tuple(s for _, s in stage_spec)
        spec_text = ",".join(f"{c}:{s}" for c, s in stage_spec)
        self.descriptor = f"synthetic:seed={seed}:stages={spec_text}"
        self.freeze()

    def _forward_stages(self, x, upto):
        outs = []
        for block in self.blocks[: upto + 1]:
            x = torch.tanh(block(x))
            outs.append(x)
        return outs


class WideResNetBackbone(FeatureExtractor):
    """WideResNet-50-2 truncated after ``layer3``; weights come from a local file.

    Stages 0, 1, 2 are ``layer1``..``layer3`` with 256 + 512 + 1024 = 1792 channels.
    """

    def __init__(self, weights_path: str = ""):
        super().__init__()
        from torchvision.models import wide_resnet50_2

        net = wide_resnet50_2(weights=None)
        if weights_path:
            try:
                state = torch.load(weights_path, map_location="cpu", weights_only=True)
            except (OSError, RuntimeError) as exc:
                raise ConfigError(f"cannot load backbone weights {weights_path}: {exc}") from None
            net.load_state_dict(state)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3])
        self.stage_channels = (256, 512, 1024)
        self.stage_strides = (4, 8, 16)
        tag = Path(weights_path).name if weights_path else "random-init"
        self.descriptor = f"wide_resnet50_2:{tag}"
        self.freeze()

    def _forward_stages(self, x, upto):
        x = self.stem(x)
        outs = []
        for layer in self.layers[: upto + 1]:
            x = layer(x)
            outs.append(x)
        return outs


def parse_stage_spec(text: str) -> list[tuple[int, int]]:
    """Parse ``"16:2,32:4"`` into ``[(16, 2), (32, 4)]``."""
    try:
        spec = []
        for item in text.split(","):
            c, s = item.split(":")
            spec.append((int(c), int(s)))
    except ValueError:
        raise ConfigError(f"bad stage spec {text!r}; expected 'channels:stride,...'") from None
    return spec


def make_synthetic_backbone(seed: int, stage_spec: Sequence[tuple[int, int]]) -> SyntheticBackbone:
    return SyntheticBackbone(seed, stage_spec)


def make_extractor(cfg) -> FeatureExtractor:
    if cfg.backbone == "synthetic":
        return make_synthetic_backbone(cfg.backbone_seed, parse_stage_spec(cfg.backbone_stages or "16:2,32:4"))
    if cfg.backbone == "wide_resnet50_2":
        return WideResNetBackbone(cfg.backbone_weights)
    raise ConfigError(f"unknown backbone {cfg.backbone!r}")


def extract_stages(
    images: torch.Tensor, extractor: FeatureExtractor, stages: Sequence[int] | None = None
) -> list[torch.Tensor]:
    """Run the frozen extractor and return the requested stage maps (no autograd)."""
    if stages is None:
        stages = range(len(extractor.stage_channels))
    stages = list(stages)
    n = len(extractor.stage_channels)
    if not stages or any(not 0 <= s < n for s in stages):
        raise ConfigError(f"invalid stage ids {stages}; extractor has {n} stages")
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    with torch.no_grad():
        outs = extractor._forward_stages(images, max(stages))
    picked = [outs[s] for s in stages]
    return [o.squeeze(0) for o in picked] if squeeze else picked


def fuse_features(stage_maps: Sequence[torch.Tensor], target) -> torch.Tensor:
    """Resize every stage map to ``target`` (bilinear) and concatenate along channels."""
    if not stage_maps:
        raise ConfigError("fuse_features needs at least one stage map")
    if isinstance(target, int):
        target = (target, target)
    squeeze = stage_maps[0].dim() == 3
    maps = [m.unsqueeze(0) if squeeze else m for m in stage_maps]
    if any(m.dim() != 4 or m.shape[0] != maps[0].shape[0] for m in maps):
        raise ConfigError("stage maps must share batch size and be rank 3 or 4")
    resized = [
        m if tuple(m.shape[-2:]) == tuple(target)
        else F.interpolate(m, size=target, mode="bilinear", align_corners=False)
        for m in maps
    ]
    fused = torch.cat(resized, dim=1)
    return fused.squeeze(0) if squeeze else fused


def extract_features(images: torch.Tensor, extractor: FeatureExtractor, feature_size: int) -> torch.Tensor:
    return fuse_features(extract_stages(images, extractor), feature_size)


# ---------------------------------------------------------------------------
# FSRF container: magic, u16 version, descriptor, source id, u8 dtype, 3 x u32
# shape (H, W, C), then little-endian float32 payload in H, W, C order.

FSRF_MAGIC = b"FSRF"
FSRF_VERSION = 1
_DTYPE_F32 = 0


@dataclass
class FeatureMap:
    data: torch.Tensor  # (C, H, W) float32
    descriptor: str
    source: str


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigError("string too long for FSRF header")
    return struct.pack("<H", len(raw)) + raw


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_feature_map(data: torch.Tensor, descriptor: str, source: str) -> bytes:
    if data.dim() == 2:
        data = data.unsqueeze(0)
    if data.dim() != 3:
        raise ConfigError(f"feature map must be rank 3 (C, H, W), got shape {tuple(data.shape)}")
    c, h, w = data.shape
    hwc = data.detach().to(torch.float32).permute(1, 2, 0).contiguous().numpy()
    header = (
        FSRF_MAGIC
        + struct.pack("<H", FSRF_VERSION)
        + _pack_str(descriptor)
        + _pack_str(source)
        + struct.pack("<B3I", _DTYPE_F32, h, w, c)
    )
    return header + hwc.astype("<f4").tobytes()


def write_feature_cache(data: torch.Tensor, path, descriptor: str, source: str = "") -> None:
    atomic_write(path, encode_feature_map(data, descriptor, source))


def decode_feature_map(buf: bytes) -> FeatureMap:
    try:
        if buf[:4] != FSRF_MAGIC:
            raise CacheError("bad magic: not an FSRF file")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != FSRF_VERSION:
            raise CacheError(f"unsupported FSRF version {version}")
        pos = 6
        strings = []
        for _ in range(2):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > len(buf):
                raise CacheError("truncated FSRF header")
            strings.append(buf[pos : pos + n].decode("utf-8"))
            pos += n
        dtype, h, w, c = struct.unpack_from("<B3I", buf, pos)
        pos += 13
        if dtype != _DTYPE_F32:
            raise CacheError(f"unsupported dtype code {dtype}")
        expected = h * w * c * 4
        if len(buf) - pos != expected:
            raise CacheError(f"payload size {len(buf) - pos} != expected {expected}")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CacheError(f"corrupt FSRF file: {exc}") from None
    arr = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(h, w, c)
    data = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1).contiguous()
    return FeatureMap(data, strings[0], strings[1])


def read_feature_cache(path, expected_descriptor: str | None = None) -> FeatureMap:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CacheError(f"cannot read {path}: {exc}") from None
    fmap = decode_feature_map(buf)
    if expected_descriptor is not None and fmap.descriptor != expected_descriptor:
        raise CacheError(
            f"cache descriptor mismatch: file has {fmap.descriptor!r}, "
            f"active extractor is {expected_descriptor!r}"
        )
    return fmap
