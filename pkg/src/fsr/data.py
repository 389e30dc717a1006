"""MVTec-style dataset indexing, training-setting builders and image loading.

Expected layout under ``root``::

    <category>/train/good/*.png|jpg|bmp
    <category>/test/good/*
    <category>/test/<defect_type>/*
    <category>/ground_truth/<defect_type>/<stem>_mask.png   (or <stem>.png)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigError,
    DecodeError,
    InsufficientSamplesError,
    LayoutError,
    MaskMissingError,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MODES = ("few_shot", "separate", "unified")


@dataclass(frozen=True)
class TestSample:
    path: Path
    defect_type: str
    is_anomalous: bool


@dataclass(frozen=True)
class DatasetIndex:
    category: str
    train_images: tuple[Path, ...]
    test_images: tuple[TestSample, ...]
    mask_paths: dict[Path, Path] = field(default_factory=dict)

    def mask_for(self, sample: TestSample) -> Path | None:
        return self.mask_paths.get(sample.path)


@dataclass(frozen=True)
class SettingSpec:
    mode: str = "separate"
    categories: tuple[str, ...] = ()
    k: int | None = None
    seed: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown setting {self.mode!r}; expected one of {MODES}")
        if self.k is not None and self.k <= 0:
            raise ConfigError("k must be a positive integer")
        if self.mode == "few_shot" and self.k is None:
            raise ConfigError("few_shot setting requires k")


@dataclass(frozen=True)
class TrainingSet:
    name: str
    paths: tuple[Path, ...]

    def __len__(self):
        return len(self.paths)


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    for name in (f"{stem}_mask.png", f"{stem}.png"):
        candidate = gt_dir / name
        if candidate.is_file():
            return candidate
    return None


def scan_dataset(root, category: str) -> DatasetIndex:
    """Index one category. Ordering is lexicographic so results are stable."""
    cat_dir = Path(root) / category
    train_dir = cat_dir / "train" / "good"
    test_dir = cat_dir / "test"
    for required in (cat_dir, train_dir, test_dir):
        if not required.is_dir():
            raise LayoutError(required)

    train = tuple(_image_files(train_dir))
    tests: list[TestSample] = []
    masks: dict[Path, Path] = {}
    missing: list[Path] = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        anomalous = defect != "good"
        for img in _image_files(defect_dir):
            tests.append(TestSample(img, defect, anomalous))
            if anomalous:
                mask = _find_mask(cat_dir / "ground_truth" / defect, img.stem)
                if mask is None:
                    missing.append(img)
                else:
                    masks[img] = mask
    if missing:
        raise MaskMissingError(missing)
    return DatasetIndex(category, train, tuple(tests), masks)


def list_categories(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(root)
    return sorted(p.name for p in root.iterdir() if (p / "train").is_dir())


def build_setting(indices: Sequence[DatasetIndex], spec: SettingSpec) -> list[TrainingSet]:
    """Materialize the training set(s) for a few-shot, separate or unified run."""
    if spec.categories:
        by_name = {ix.category: ix for ix in indices}
        absent = [c for c in spec.categories if c not in by_name]
        if absent:
            raise ConfigError(f"categories not indexed: {absent}")
        indices = [by_name[c] for c in spec.categories]
    if not indices:
        raise ConfigError("no categories to build a setting from")

    if spec.mode == "separate":
        return [TrainingSet(ix.category, ix.train_images) for ix in indices]
    if spec.mode == "unified":
        if len(indices) < 2:
            raise ConfigError("unified setting needs at least two categories")
        pooled = tuple(p for ix in indices for p in ix.train_images)
        return [TrainingSet("unified", pooled)]

    sets = []
    for ix in indices:
        available = len(ix.train_images)
        if spec.k > available:
            raise InsufficientSamplesError(
                f"insufficient samples: category {ix.category!r} has {available} "
                f"train images, k={spec.k}"
            )
        # Per-category stream so a category's draw does not depend on its neighbours.
        rng = np.random.default_rng([spec.seed, _stable_hash(ix.category)])
        chosen = np.sort(rng.choice(available, size=spec.k, replace=False))
        sets.append(TrainingSet(ix.category, tuple(ix.train_images[i] for i in chosen)))
    return sets


def _stable_hash(text: str) -> int:
    h = 2166136261
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def _read(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from None


def resize_bilinear(x: torch.Tensor, size) -> torch.Tensor:
    """Half-pixel bilinear resize of a (C, H, W) or (B, C, H, W) tensor, no antialiasing."""
    if isinstance(size, int):
        size = (size, size)
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.squeeze(0) if squeeze else x


def load_image(path, size: int, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> torch.Tensor:
    """Load an RGB image as a normalized (3, size, size) float32 tensor."""
    arr = _read(path, "RGB").astype(np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    x = resize_bilinear(x, size)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (x - mean_t) / std_t


def load_mask(path, size: int) -> np.ndarray:
    """Load a ground-truth mask as a {0, 1} uint8 array of shape (size, size)."""
    arr = _read(path, "L")
    return binarize_mask(arr, size)


def binarize_mask(arr: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
    if tuple(t.shape[-2:]) != (size, size):
        t = F.interpolate(t, size=(size, size), mode="nearest")
    return (t[0, 0].numpy() > 0).astype(np.uint8)
