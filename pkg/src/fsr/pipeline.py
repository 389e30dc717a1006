"""Training loop, evaluation and single-image prediction."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, model_tensors, save_checkpoint
from .config import RunConfig, dump_config
from .data import DatasetIndex, TrainingSet, load_image, load_mask
from .errors import CacheError, ConfigError, DivergenceError
from .features import (
    FeatureExtractor,
    extract_features,
    make_extractor,
    read_feature_cache,
    write_feature_cache,
)
from .model import FSRModel
from .objective import restoration_loss
from .scoring import AnomalyMap, CategoryMetrics, MetricsReport, anomaly_maps, auroc, pixel_auroc, write_heatmap

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "local_mse", "local_cos", "global_cos", "total")


def _cache_path(cache_dir: Path, path: Path) -> Path:
    stem = f"{path.parent.parent.name}_{path.parent.name}_{path.stem}" if path.parent.parent.name else path.stem
    return cache_dir / f"{stem}.fsrf"


def compute_features(
    paths: Sequence[Path],
    extractor: FeatureExtractor,
    cfg: RunConfig,
    batch_size: int = 8,
) -> torch.Tensor:
    """Fused features for each image, read from ``cfg.feature_cache`` when present."""
    cache_dir = Path(cfg.feature_cache) if cfg.feature_cache else None
    out: list[torch.Tensor | None] = [None] * len(paths)
    todo = []
    for i, p in enumerate(paths):
        if cache_dir is not None and _cache_path(cache_dir, Path(p)).is_file():
            out[i] = read_feature_cache(_cache_path(cache_dir, Path(p)), extractor.descriptor).data
        else:
            todo.append(i)
    for start in range(0, len(todo), batch_size):
        chunk = todo[start : start + batch_size]
        images = torch.stack([load_image(paths[i], cfg.image_size, cfg.norm_mean, cfg.norm_std) for i in chunk])
        feats = extract_features(images, extractor, cfg.feature_size)
        for i, f in zip(chunk, feats):
            out[i] = f
            if cache_dir is not None:
                write_feature_cache(f, _cache_path(cache_dir, Path(paths[i])), extractor.descriptor, str(paths[i]))
    if not out:
        return torch.empty(0)
    return torch.stack(out)


def train_on_features(
    cfg: RunConfig,
    features: torch.Tensor,
    out_dir=None,
    name: str = "model",
    extractor_descriptor: str = "",
    save_optimizer: bool = False,
) -> Checkpoint:
    """Optimize a fresh model on precomputed (N, C, H, W) target features.

    One epoch is one pass over the set, whatever the batch size. When
    ``cfg.steps`` is set it replaces the epoch budget.
    """
    if features.dim() != 4 or features.shape[0] == 0:
        raise ConfigError("training set is empty")
    if features.shape[-1] != cfg.feature_size or features.shape[-2] != cfg.feature_size:
        raise ConfigError(f"features are {tuple(features.shape[-2:])}, config expects {cfg.feature_size}")
    n, channels = features.shape[0], features.shape[1]
    model = FSRModel.from_config(cfg, channels)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.effective_batch_size, n)
    per_epoch = math.ceil(n / bs)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch

    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    state = {"channels": str(channels), "extractor": extractor_descriptor, "name": name}

    def snapshot(epoch: int, step: int) -> Checkpoint:
        st = dict(state, epoch=str(epoch), step=str(step))
        if save_optimizer:
            st["optim_step"] = str(step)
        return Checkpoint(cfg, model_tensors(model, opt if save_optimizer else None), st)

    model.train()
    step, epoch = 0, 0
    while step < total_steps:
        order = rng.permutation(n)
        for start in range(0, n, bs):
            if step >= total_steps:
                break
            batch = features[order[start : start + bs]]
            restored, _ = model(batch, tau=cfg.tau, rng=rng, per_sample=cfg.per_sample_shuffle)
            loss = restoration_loss(batch, restored)
            step += 1
            if not torch.isfinite(loss.total):
                raise DivergenceError(step)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            vals = loss.as_floats()
            rows.append((step, vals["local_mse"], vals["local_cos"], vals["global_cos"], vals["total"]))
        epoch += 1
        if out_dir is not None and epoch % cfg.checkpoint_every == 0 and step < total_steps:
            save_checkpoint(out_dir / f"epoch_{epoch:04d}.fsr", snapshot(epoch, step))

    model.eval()
    ckpt = snapshot(epoch, step)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "model.fsr", ckpt)
        write_loss_log(out_dir / "loss.csv", rows)
    ckpt.loss_log = rows
    log.info("trained %s: %d steps, final loss %.5f", name, step, rows[-1][-1])
    return ckpt


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for step, *vals in rows:
            w.writerow([step, *(repr(v) for v in vals)])


def train(
    cfg: RunConfig,
    sets: Sequence[TrainingSet],
    extractor: FeatureExtractor | None = None,
    out_dir=None,
) -> list[Checkpoint]:
    """Train one model per training set (one per category, or one pooled)."""
    if not sets:
        raise ConfigError("no training sets")
    extractor = extractor or make_extractor(cfg)
    root = Path(out_dir if out_dir is not None else cfg.out)
    checkpoints = []
    for ts in sets:
        if len(ts) == 0:
            raise ConfigError(f"training set {ts.name!r} is empty")
        feats = compute_features(ts.paths, extractor, cfg)
        checkpoints.append(
            train_on_features(cfg, feats, root / ts.name, ts.name, extractor.descriptor)
        )
    return checkpoints


def restore_features(model: FSRModel, feats: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Unshuffled forward pass (inference never calls the shuffler)."""
    outs = []
    with torch.no_grad():
        for start in range(0, feats.shape[0], batch_size):
            restored, _ = model(feats[start : start + batch_size], tau=0.0)
            outs.append(restored)
    return torch.cat(outs) if outs else feats.new_empty(feats.shape)


def score_features(model: FSRModel, feats: torch.Tensor, cfg: RunConfig, sources=None) -> list[AnomalyMap]:
    restored = restore_features(model, feats)
    return anomaly_maps(
        feats, restored, cfg.image_size, cfg.smoothing_sigma, cfg.image_score, sources=sources
    )


def _extractor_for(ckpt: Checkpoint) -> FeatureExtractor:
    extractor = make_extractor(ckpt.config)
    recorded = ckpt.state.get("extractor", "")
    if recorded and recorded != extractor.descriptor:
        raise CacheError(f"checkpoint was trained with extractor {recorded!r}, config builds {extractor.descriptor!r}")
    return extractor


def evaluate_index(
    model: FSRModel, extractor: FeatureExtractor, cfg: RunConfig, index: DatasetIndex
) -> CategoryMetrics:
    paths = [s.path for s in index.test_images]
    feats = compute_features(paths, extractor, cfg)
    maps = score_features(model, feats, cfg, sources=[str(p) for p in paths])
    labels = [int(s.is_anomalous) for s in index.test_images]
    masks = []
    for s in index.test_images:
        mp = index.mask_for(s)
        size = cfg.image_size
        masks.append(load_mask(mp, size) if mp is not None else np.zeros((size, size), np.uint8))
    return CategoryMetrics(
        image_auroc=auroc([m.image_score for m in maps], labels),
        pixel_auroc=pixel_auroc(maps, masks),
        n_normal=labels.count(0),
        n_anomalous=labels.count(1),
    )


def evaluate(ckpt: Checkpoint, indices: Sequence[DatasetIndex]) -> MetricsReport:
    model = ckpt.build_model()
    extractor = _extractor_for(ckpt)
    report = MetricsReport(config=dump_config(ckpt.config))
    for index in indices:
        report.categories[index.category] = evaluate_index(model, extractor, ckpt.config, index)
    return report


def predict(ckpt: Checkpoint, image_path, out_dir=None) -> AnomalyMap:
    """Score one image; with ``out_dir`` also write a raw FSRF raster and a PNG heatmap."""
    cfg = ckpt.config
    model = ckpt.build_model()
    extractor = _extractor_for(ckpt)
    image = load_image(image_path, cfg.image_size, cfg.norm_mean, cfg.norm_std)
    feats = extract_features(image.unsqueeze(0), extractor, cfg.feature_size)
    amap = score_features(model, feats, cfg, sources=[str(image_path)])[0]
    if out_dir is not None:
        out_dir = Path(out_dir)
        stem = Path(image_path).stem
        write_feature_cache(torch.from_numpy(amap.pixel_scores), out_dir / f"{stem}_map.fsrf", "anomaly_map", str(image_path))
        write_heatmap(amap.pixel_scores, out_dir / f"{stem}_heatmap.png")
    return amap
