"""FSR1 checkpoint container.

Layout: magic ``FSR1``, u16 version, u32-length-prefixed UTF-8 config echo
(flat ``key=value`` lines plus ``state.*`` lines), u32 tensor count, then per
tensor: u16-prefixed name, u8 rank, u32 dims, little-endian float32 data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, parse_config_text
from .errors import CacheError
from .features import atomic_write
from .model import FSRModel

MAGIC = b"FSR1"
VERSION = 1

# Fields that fix tensor shapes; a mismatch against the active config is fatal.
ARCH_FIELDS = ("feature_size", "patch", "depth", "width", "heads", "mlp_ratio", "pos_embed")


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, torch.Tensor]
    state: dict[str, str] = field(default_factory=dict)
    # (step, local_mse, local_cos, global_cos, total) rows; not serialized
    loss_log: list = field(default_factory=list, repr=False, compare=False)

    @property
    def channels(self) -> int:
        return int(self.state["channels"])

    @property
    def epoch(self) -> int:
        return int(self.state.get("epoch", 0))

    def build_model(self) -> FSRModel:
        model = FSRModel.from_config(self.config, self.channels)
        params = {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}
        expected = model.state_dict()
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise CacheError(f"checkpoint tensors do not match model (missing {missing}, unexpected {extra})")
        for name, tensor in params.items():
            if tuple(tensor.shape) != tuple(expected[name].shape):
                raise CacheError(
                    f"shape mismatch for {name}: checkpoint {tuple(tensor.shape)}, "
                    f"model {tuple(expected[name].shape)}"
                )
        model.load_state_dict(params)
        return model.eval()

    def check_config(self, cfg: RunConfig) -> None:
        diffs = [
            f"{f}: checkpoint={getattr(self.config, f)!r} active={getattr(cfg, f)!r}"
            for f in ARCH_FIELDS
            if getattr(self.config, f) != getattr(cfg, f)
        ]
        if diffs:
            raise CacheError("checkpoint/config architecture mismatch: " + "; ".join(diffs))


def model_tensors(model: FSRModel, optimizer: torch.optim.Optimizer | None = None) -> dict[str, torch.Tensor]:
    tensors = {k: v.detach() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                for key in ("exp_avg", "exp_avg_sq"):
                    tensors[f"optim.{names[id(p)]}.{key}"] = st[key].detach()
    return tensors


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    echo = dump_config(ckpt.config) + "".join(f"state.{k}={v}\n" for k, v in sorted(ckpt.state.items()))
    echo_b = echo.encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(echo_b)), echo_b, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().to(torch.float32).contiguous()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    try:
        if buf[:4] != MAGIC:
            raise CacheError("not an FSR1 checkpoint (bad magic)")
        version, n_echo = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CacheError(f"unsupported checkpoint version {version}")
        pos = 10
        echo = buf[pos : pos + n_echo].decode("utf-8")
        pos += n_echo
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CacheError(f"truncated tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
        if pos != len(buf):
            raise CacheError("trailing bytes after last tensor")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CacheError(f"corrupt checkpoint: {exc}") from None

    state, config_lines = {}, []
    for line in echo.splitlines():
        if line.startswith("state."):
            key, value = line[len("state.") :].split("=", 1)
            state[key] = value
        else:
            config_lines.append(line)
    cfg = parse_config_text("\n".join(config_lines))
    return Checkpoint(cfg, tensors, state)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CacheError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf)
