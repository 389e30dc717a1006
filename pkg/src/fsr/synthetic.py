"""Seeded periodic textures with injected anomalies, for CPU-scale benchmarks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

TEXTURES = ("stripes", "checker", "dots")


@dataclass
class TextureCategory:
    name: str
    train: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    test: np.ndarray
    labels: np.ndarray  # (M,) 0 normal, 1 anomalous
    masks: np.ndarray  # (M, H, W) uint8


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def render_texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One normal sample: fixed period and palette per kind, random phase and small jitter."""
    yy, xx = _grid(size)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    if kind == "stripes":
        angle = np.deg2rad(30.0 + rng.normal(0, 2.0))
        u = np.cos(angle) * xx + np.sin(angle) * yy
        v = 0.5 + 0.5 * np.sin(2 * np.pi * u / 8.0 + phase[0])
        c0, c1 = np.array([0.15, 0.25, 0.6]), np.array([0.9, 0.85, 0.4])
    elif kind == "checker":
        v = np.sin(2 * np.pi * xx / 12.0 + phase[0]) * np.sin(2 * np.pi * yy / 12.0 + phase[1])
        v = 0.5 + 0.5 * np.tanh(3 * v)
        c0, c1 = np.array([0.7, 0.2, 0.2]), np.array([0.95, 0.9, 0.9])
    elif kind == "dots":
        px, py = 10.0, 10.0
        dx = (xx + phase[0] / (2 * np.pi) * px) % px - px / 2
        dy = (yy + phase[1] / (2 * np.pi) * py) % py - py / 2
        v = np.exp(-(dx**2 + dy**2) / (2 * 2.0**2))
        c0, c1 = np.array([0.2, 0.5, 0.25]), np.array([0.95, 0.95, 0.7])
    else:
        raise ValueError(f"unknown texture {kind!r}")
    img = c0 + v[..., None] * (c1 - c0)
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


ANOMALY_STYLES = ("patch", "shift", "blob", "scratch")


def inject_anomaly(
    img: np.ndarray,
    kind: str,
    rng: np.random.Generator,
    styles=ANOMALY_STYLES,
    patch_frac=(0.125, 0.25),
) -> tuple[np.ndarray, np.ndarray]:
    """Paste a foreign structure into ``img``; returns the new image and its mask.

    ``patch`` copies a square of another texture kind, ``shift`` copies a
    square of the same kind at a different phase (locally normal, globally
    misplaced), ``blob`` blends a Gaussian colour spot, ``scratch`` draws a
    thin line.
    """
    size = img.shape[0]
    out = img.copy()
    mask = np.zeros((size, size), np.uint8)
    style = styles[int(rng.integers(len(styles)))]
    if style in ("patch", "shift"):
        side = int(rng.integers(int(size * patch_frac[0]), int(size * patch_frac[1]) + 1))
        y0, x0 = rng.integers(0, size - side, size=2)
        if style == "patch":
            source = str(rng.choice([t for t in TEXTURES if t != kind]))
        else:
            source = kind
        other = render_texture(source, size, rng)
        out[y0 : y0 + side, x0 : x0 + side] = other[y0 : y0 + side, x0 : x0 + side]
        mask[y0 : y0 + side, x0 : x0 + side] = 1
    elif style == "blob":
        yy, xx = _grid(size)
        cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
        r = rng.uniform(size / 16, size / 9)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        color = rng.uniform(0, 1, size=3)
        out = out * (1 - w[..., None]) + color * w[..., None]
        mask[w > 0.3] = 1
    else:
        yy, xx = _grid(size)
        y0, x0 = rng.uniform(size * 0.2, size * 0.8, size=2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(size / 4, size / 2)
        t = (xx - x0) * np.cos(angle) + (yy - y0) * np.sin(angle)
        d = np.abs(-(xx - x0) * np.sin(angle) + (yy - y0) * np.cos(angle))
        line = (np.abs(t) <= length / 2) & (d <= 1.5)
        out[line] = rng.uniform(0, 1, size=3)
        mask[line] = 1
    return np.clip(out, 0, 1).astype(np.float32), mask


def make_category(
    kind: str,
    size: int = 64,
    n_train: int = 16,
    n_test_normal: int = 8,
    n_test_anomalous: int = 8,
    seed: int = 0,
    styles=ANOMALY_STYLES,
    patch_frac=(0.125, 0.25),
) -> TextureCategory:
    rng = np.random.default_rng([seed, TEXTURES.index(kind) if kind in TEXTURES else 99])
    train = np.stack([render_texture(kind, size, rng) for _ in range(n_train)])
    test, labels, masks = [], [], []
    for _ in range(n_test_normal):
        test.append(render_texture(kind, size, rng))
        labels.append(0)
        masks.append(np.zeros((size, size), np.uint8))
    for _ in range(n_test_anomalous):
        img, m = inject_anomaly(render_texture(kind, size, rng), kind, rng, styles, patch_frac)
        test.append(img)
        labels.append(1)
        masks.append(m)
    return TextureCategory(kind, train, np.stack(test), np.array(labels), np.stack(masks))


def make_benchmark(n_textures: int, size: int = 64, seed: int = 0, **kw) -> list[TextureCategory]:
    if not 1 <= n_textures <= len(TEXTURES):
        raise ValueError(f"n_textures must be in 1..{len(TEXTURES)}")
    return [make_category(k, size, seed=seed, **kw) for k in TEXTURES[:n_textures]]


def write_mvtec_tree(categories: list[TextureCategory], root) -> Path:
    """Materialize categories on disk in the MVTec layout (PNG files)."""
    root = Path(root)

    def save(arr, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)

    for cat in categories:
        base = root / cat.name
        for i, img in enumerate(cat.train):
            save(img, base / "train" / "good" / f"{i:03d}.png")
        for i, (img, label, mask) in enumerate(zip(cat.test, cat.labels, cat.masks)):
            defect = "defect" if label else "good"
            save(img, base / "test" / defect / f"{i:03d}.png")
            if label:
                m = base / "ground_truth" / defect / f"{i:03d}_mask.png"
                m.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(mask * 255).save(m)
    return root
