"""Run configuration, named presets and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SettingSpec
from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BATCH_SIZE_BY_MODE = {"few_shot": 1, "separate": 8, "unified": 8}


@dataclass
class RunConfig:
    setting: SettingSpec = field(default_factory=SettingSpec)
    tau: float = 0.1
    image_size: int = 256
    feature_size: int = 64
    patch: int = 4
    depth: int = 8
    width: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    epochs: int = 300
    # Overrides ``epochs`` with a fixed number of optimizer steps when set.
    steps: int | None = None
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int | None = None
    seed: int = 1
    backbone: str = "wide_resnet50_2"
    backbone_weights: str = ""
    backbone_stages: str = ""
    backbone_seed: int = 0
    norm_mean: tuple[float, ...] = IMAGENET_MEAN
    norm_std: tuple[float, ...] = IMAGENET_STD
    pos_embed: str = "sinusoidal"
    per_sample_shuffle: bool = False
    image_score: str = "std"
    smoothing_sigma: float = 0.0
    checkpoint_every: int = 50
    data: str = ""
    out: str = "runs"
    feature_cache: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return BATCH_SIZE_BY_MODE[self.setting.mode]

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        for name in ("image_size", "feature_size", "patch", "width", "heads", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.feature_size % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide feature_size {self.feature_size}"
            )
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ConfigError("width must be even for sinusoidal positions")
        if self.steps is not None and self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.pos_embed not in ("sinusoidal", "learnable", "none"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")
        if self.image_score not in ("std", "max"):
            raise ConfigError(f"unknown image_score {self.image_score!r}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3:
            raise ConfigError("norm_mean and norm_std need three values")
        if any(s <= 0 for s in self.norm_std):
            raise ConfigError("norm_std entries must be positive")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")

    def replace(self, **changes) -> "RunConfig":
        setting_keys = {"mode", "categories", "k"}
        setting_changes = {k: changes.pop(k) for k in list(changes) if k in setting_keys}
        setting = self.setting
        if setting_changes or "seed" in changes:
            seed = changes.get("seed", self.seed)
            setting = dataclasses.replace(setting, seed=seed, **setting_changes)
        return dataclasses.replace(self, setting=setting, **changes)


def _preset(**kw) -> RunConfig:
    return RunConfig().replace(**kw)


# Shuffling rates per setting, plus the default rate balancing all three.
PRESETS = {
    "default": lambda: _preset(),
    "fewshot": lambda: _preset(mode="few_shot", k=8, tau=0.1),
    "separate": lambda: _preset(mode="separate", tau=0.3),
    "unified": lambda: _preset(mode="unified", tau=0.9),
    # CPU-sized model on the seeded synthetic backbone.
    "desk": lambda: _preset(
        image_size=64,
        feature_size=16,
        patch=2,
        depth=2,
        width=64,
        heads=4,
        backbone="synthetic",
        backbone_stages="16:2,32:4",
        norm_mean=(0.5, 0.5, 0.5),
        norm_std=(0.5, 0.5, 0.5),
        steps=200,
    ),
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# flat key=value format

_MODE_ALIASES = {"few-shot": "few_shot", "fewshot": "few_shot"}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _parse_opt_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


_FIELD_PARSERS = {
    "tau": float,
    "image_size": int,
    "feature_size": int,
    "patch": int,
    "depth": int,
    "width": int,
    "heads": int,
    "mlp_ratio": float,
    "epochs": int,
    "steps": _parse_opt_int,
    "lr": float,
    "weight_decay": float,
    "batch_size": _parse_opt_int,
    "seed": int,
    "backbone": str,
    "backbone_weights": str,
    "backbone_stages": str,
    "backbone_seed": int,
    "norm_mean": _parse_floats,
    "norm_std": _parse_floats,
    "pos_embed": str,
    "per_sample_shuffle": _parse_bool,
    "image_score": str,
    "smoothing_sigma": float,
    "checkpoint_every": int,
    "data": str,
    "out": str,
    "feature_cache": str,
}

_SETTING_PARSERS = {
    "setting": lambda t: _MODE_ALIASES.get(t, t),
    "categories": lambda t: tuple(c.strip() for c in t.split(",") if c.strip()),
    "k": _parse_opt_int,
}

CONFIG_KEYS = ("preset", *_SETTING_PARSERS, *_FIELD_PARSERS)


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string-valued overrides to ``base`` with strict key checking."""
    pairs = dict(pairs)
    if "preset" in pairs:
        cfg = preset(pairs.pop("preset"))
        if base is not None:
            raise ConfigError("'preset' cannot be combined with an explicit base config")
    else:
        cfg = base or RunConfig()
    changes = {}
    for key, raw in pairs.items():
        raw = raw.strip()
        try:
            if key in _SETTING_PARSERS:
                value = _SETTING_PARSERS[key](raw)
                changes["mode" if key == "setting" else key] = value
            elif key in _FIELD_PARSERS:
                changes[key] = _FIELD_PARSERS[key](raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
    return cfg.replace(**changes)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_overrides(pairs, base)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    """Serialize to the flat format; ``parse_config_text`` inverts it."""

    def fmt(value):
        if value is None:
            return "none"
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = [
        f"setting={cfg.setting.mode}",
        f"categories={fmt(cfg.setting.categories)}",
        f"k={fmt(cfg.setting.k)}",
    ]
    for name in _FIELD_PARSERS:
        lines.append(f"{name}={fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"
