"""Anomaly maps, AUROC metrics and two small theory probes.

The probes are
* an exact mutual-information calculator between a discrete sequence and its
  shuffled copy, by enumeration of every sequence and every shuffle outcome;
* the identity-shortcut witness: with zeroed output projections the
  restoration net is the identity, so plain reconstruction error vanishes
  while restoration-from-shuffled error does not.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata
from sympy.utilities.iterables import multiset_permutations

from .core import random_shuffle
from .data import resize_bilinear
from .errors import ConfigError, DegenerateLabelsError
from .objective import position_cos_distance, position_sq_error
from .restoration import RestorationNet, restore


@dataclass
class AnomalyMap:
    pixel_scores: np.ndarray  # (H, W) float32, >= 0
    image_score: float
    source: str = ""


def anomaly_score_lowres(features: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    """Squared error times cosine distance per feature position, (B, H_F, W_F)."""
    if features.shape != restored.shape:
        raise ConfigError(f"shape mismatch: {tuple(features.shape)} vs {tuple(restored.shape)}")
    if features.dim() == 3:
        features, restored = features.unsqueeze(0), restored.unsqueeze(0)
    f = features.to(torch.promote_types(features.dtype, torch.float32))
    r = restored.to(f.dtype)
    # clamp only removes round-off below zero in the cosine factor
    cos = position_cos_distance(f, r).clamp_min(0.0)
    return position_sq_error(f, r) * cos


def image_score_of(pixel_scores: np.ndarray, mode: str = "std") -> float:
    if mode == "std":
        return float(np.std(pixel_scores, dtype=np.float64))
    if mode == "max":
        return float(np.max(pixel_scores))
    raise ConfigError(f"unknown image score mode {mode!r}")


def anomaly_maps(
    features: torch.Tensor,
    restored: torch.Tensor,
    image_size: int,
    smoothing_sigma: float = 0.0,
    score_mode: str = "std",
    sources: Sequence[str] | None = None,
) -> list[AnomalyMap]:
    low = anomaly_score_lowres(features, restored)
    full = resize_bilinear(low.unsqueeze(1), image_size)[:, 0].clamp_min(0.0)
    out = []
    for i, arr in enumerate(full.detach().cpu().numpy().astype(np.float32)):
        if smoothing_sigma > 0:
            arr = gaussian_filter(arr, sigma=smoothing_sigma).astype(np.float32)
        src = sources[i] if sources is not None else ""
        out.append(AnomalyMap(arr, image_score_of(arr, score_mode), src))
    return out


def anomaly_map(features, restored, image_size: int, **kw) -> AnomalyMap:
    """Single-image convenience wrapper around :func:`anomaly_maps`."""
    if features.dim() != 3:
        raise ConfigError("anomaly_map expects a single (C, H, W) map")
    return anomaly_maps(features, restored, image_size, **kw)[0]


def auroc(scores, labels) -> float:
    """Rank-sum AUROC: P(pos > neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ConfigError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("degenerate labels: need both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[AnomalyMap | np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC over every pixel of every image pooled together."""
    if len(maps) != len(masks):
        raise ConfigError("maps and masks are not paired")
    score_parts, label_parts = [], []
    for m, mask in zip(maps, masks):
        arr = m.pixel_scores if isinstance(m, AnomalyMap) else np.asarray(m)
        if arr.shape != mask.shape:
            raise ConfigError(f"map {arr.shape} and mask {mask.shape} differ in size")
        score_parts.append(arr.ravel())
        label_parts.append(np.asarray(mask).ravel())
    return auroc(np.concatenate(score_parts), np.concatenate(label_parts))


def write_heatmap(pixel_scores: np.ndarray, path) -> None:
    """8-bit grayscale heatmap scaled by the map's own maximum."""
    peak = float(pixel_scores.max())
    scaled = pixel_scores / peak if peak > 0 else np.zeros_like(pixel_scores)
    img = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L").save(path)


@dataclass
class CategoryMetrics:
    image_auroc: float
    pixel_auroc: float
    n_normal: int
    n_anomalous: int


@dataclass
class MetricsReport:
    categories: dict[str, CategoryMetrics] = field(default_factory=dict)
    config: str = ""

    @property
    def mean_image_auroc(self) -> float:
        return float(np.mean([m.image_auroc for m in self.categories.values()]))

    @property
    def mean_pixel_auroc(self) -> float:
        return float(np.mean([m.pixel_auroc for m in self.categories.values()]))

    def to_dict(self) -> dict:
        return {
            "categories": {k: asdict(v) for k, v in self.categories.items()},
            "mean_image_auroc": self.mean_image_auroc,
            "mean_pixel_auroc": self.mean_pixel_auroc,
            "config": self.config,
        }

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<path>`` as JSON and a sibling ``.csv``; returns both paths."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        json_path = path if path.suffix == ".json" else path.with_suffix(".json")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = json_path.with_suffix(".csv")
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "image_auroc", "pixel_auroc"])
            for name, m in self.categories.items():
                w.writerow([name, repr(m.image_auroc), repr(m.pixel_auroc)])
        return json_path, csv_path


# ---------------------------------------------------------------------------
# mutual information between a sequence and its shuffled copy

MAX_STATES = 4096


@dataclass(frozen=True)
class DiscreteSequenceModel:
    """i.i.d. symbols from ``probs`` over an alphabet of ``len(probs)``."""

    probs: tuple[float, ...]
    length: int

    def __post_init__(self):
        if self.length <= 0 or not self.probs:
            raise ConfigError("need a positive length and a non-empty alphabet")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
            raise ConfigError("symbol probabilities must be non-negative and sum to 1")
        if self.alphabet**self.length > MAX_STATES:
            raise ConfigError(
                f"state space {self.alphabet}^{self.length} exceeds {MAX_STATES}; too large to enumerate"
            )

    @classmethod
    def uniform(cls, alphabet: int, length: int) -> "DiscreteSequenceModel":
        return cls(tuple([1.0 / alphabet] * alphabet), length)

    @property
    def alphabet(self) -> int:
        return len(self.probs)

    def sequences(self):
        return list(itertools.product(range(self.alphabet), repeat=self.length))

    def prob(self, seq) -> float:
        return math.prod(self.probs[s] for s in seq)


def shuffle_transition(x: tuple[int, ...], num_s: int) -> dict[tuple[int, ...], float]:
    """Distribution of the shuffled sequence given ``x``.

    Each size-``num_s`` slot subset is equally likely, and within it every
    arrangement of the selected symbols has probability
    (product of symbol multiplicities!) / num_s!.
    """
    length = len(x)
    n_subsets = math.comb(length, num_s)
    k_fact = math.factorial(num_s)
    out: dict[tuple[int, ...], float] = defaultdict(float)
    for subset in itertools.combinations(range(length), num_s):
        picked = [x[i] for i in subset]
        counts = np.unique(picked, return_counts=True)[1] if picked else []
        weight = math.prod(math.factorial(int(c)) for c in counts) / k_fact / n_subsets
        for arrangement in multiset_permutations(picked) if picked else [[]]:
            y = list(x)
            for slot, sym in zip(subset, arrangement):
                y[slot] = sym
            out[tuple(y)] += weight
    return out


def entropy_bits(model: DiscreteSequenceModel) -> float:
    h = 0.0
    for seq in model.sequences():
        p = model.prob(seq)
        if p > 0:
            h -= p * math.log2(p)
    return h


def mutual_information(model: DiscreteSequenceModel, tau: float) -> float:
    """Exact I(shuffled; original) in bits as H(X) + E[log2 P(x | shuffled)]."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    num_s = int(model.length * tau)
    joint: dict[tuple, float] = {}
    marginal: dict[tuple, float] = defaultdict(float)
    for x in model.sequences():
        px = model.prob(x)
        if px == 0:
            continue
        for y, pyx in shuffle_transition(x, num_s).items():
            pxy = px * pyx
            joint[(x, y)] = pxy
            marginal[y] += pxy
    expected_log = sum(pxy * math.log2(pxy / marginal[y]) for (x, y), pxy in joint.items())
    return entropy_bits(model) + expected_log


def mutual_information_probe(model: DiscreteSequenceModel, taus: Sequence[float]) -> list[tuple[float, float]]:
    return [(float(t), mutual_information(model, t)) for t in taus]


# ---------------------------------------------------------------------------
# identity shortcut


def has_zero_output_projections(net: RestorationNet) -> bool:
    return all(
        torch.count_nonzero(t) == 0
        for b in net.blocks
        for t in (b.proj.weight, b.proj.bias, b.fc2.weight, b.fc2.bias)
    )


def shortcut_witness(net: RestorationNet, seq: torch.Tensor, tau: float, rng) -> tuple[float, float]:
    """Return ``(rec_error, fsr_error)`` as Frobenius norms against ``seq``."""
    if not has_zero_output_projections(net):
        raise ConfigError("shortcut witness needs a network with zeroed output projections")
    with torch.no_grad():
        rec, _ = restore(seq, net)
        shuffled, _ = random_shuffle(seq, tau, rng)
        fsr, _ = restore(shuffled, net)
    return float(torch.linalg.norm(rec - seq)), float(torch.linalg.norm(fsr - seq))
