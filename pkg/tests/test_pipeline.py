import numpy as np
import pytest
import torch

from fsr import core
from fsr.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from fsr.config import preset
from fsr.data import SettingSpec, build_setting, list_categories, scan_dataset
from fsr.errors import CacheError, ConfigError, DivergenceError
from fsr.bench import images_to_tensor
from fsr.features import extract_features, make_extractor, read_feature_cache
from fsr.synthetic import make_category
from fsr.model import FSRModel
from fsr.pipeline import evaluate, predict, train, train_on_features


def desk(**kw):
    base = {"steps": 30, "batch_size": 4}
    base.update(kw)
    return preset("desk").replace(**base)


def synthetic_features(n=8, channels=48, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.tanh(torch.randn(n, channels, size, size, generator=g))


@pytest.fixture(scope="module")
def normal_features():
    """Backbone features of 8 synthetic normal textures at desk scale."""
    cfg = preset("desk")
    cat = make_category("checker", cfg.image_size, n_train=8, seed=0)
    return extract_features(images_to_tensor(cat.train, cfg), make_extractor(cfg), cfg.feature_size)


def test_loss_drops_on_desk_run(normal_features):
    cfg = desk(steps=200, batch_size=8, tau=0.1)
    totals = [row[-1] for row in train_on_features(cfg, normal_features).loss_log]
    assert len(totals) == 200
    assert totals[-1] < 0.2 * totals[0]


def test_moving_average_non_increasing_late(normal_features):
    # Full batch and no shuffling, so the only moving part is the optimizer.
    cfg = desk(steps=200, batch_size=8, tau=0.0)
    totals = np.array([r[-1] for r in train_on_features(cfg, normal_features).loss_log])
    ma = np.convolve(totals, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(ma[len(ma) // 2 :]) <= 0)


def test_shuffled_training_trends_down_late(normal_features):
    cfg = desk(steps=200, batch_size=8, tau=0.1)
    totals = np.array([r[-1] for r in train_on_features(cfg, normal_features).loss_log])
    late = totals[100:]
    assert late[50:].mean() < late[:50].mean()


def test_easier_task_reaches_lower_loss(normal_features):
    rec = train_on_features(desk(steps=150, tau=0.0), normal_features).loss_log[-1][-1]
    fsr = train_on_features(desk(steps=150, tau=0.5), normal_features).loss_log[-1][-1]
    assert rec < fsr


def test_training_is_deterministic(tmp_path):
    feats = synthetic_features()
    train_on_features(desk(), feats, tmp_path / "a")
    train_on_features(desk(), feats, tmp_path / "b")
    for name in ("model.fsr", "loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_loss_log_format(tmp_path):
    train_on_features(desk(steps=5), synthetic_features(), tmp_path)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,local_mse,local_cos,global_cos,total"
    assert len(lines) == 6
    step, mse, lc, gc, total = lines[1].split(",")
    assert step == "1" and float(total) == pytest.approx(float(mse) + float(lc) + float(gc), rel=1e-6)


def test_periodic_checkpoints(tmp_path):
    cfg = desk(steps=None, epochs=5, checkpoint_every=2, batch_size=8)
    ckpt = train_on_features(cfg, synthetic_features(), tmp_path)
    assert sorted(p.name for p in tmp_path.glob("epoch_*.fsr")) == ["epoch_0002.fsr", "epoch_0004.fsr"]
    assert ckpt.epoch == 5


def test_checkpoint_round_trip_forward_bit_exact(tmp_path):
    ckpt = train_on_features(desk(pos_embed="learnable"), synthetic_features())
    model = ckpt.build_model()
    probe = synthetic_features(n=2, seed=9)
    with torch.no_grad():
        before = model(probe)[0]
    save_checkpoint(tmp_path / "m.fsr", ckpt)
    loaded = load_checkpoint(tmp_path / "m.fsr")
    with torch.no_grad():
        after = loaded.build_model()(probe)[0]
    assert torch.equal(before, after)
    assert loaded.config == ckpt.config and loaded.state == ckpt.state


def test_checkpoint_with_optimizer_state():
    ckpt = train_on_features(desk(steps=3), synthetic_features(), save_optimizer=True)
    names = list(ckpt.tensors)
    assert any(n.startswith("optim.") and n.endswith("exp_avg_sq") for n in names)
    back = decode_checkpoint(encode_checkpoint(ckpt))
    back.build_model()  # optimizer tensors are ignored when rebuilding


def test_checkpoint_header_and_corruption(tmp_path):
    ckpt = train_on_features(desk(steps=2), synthetic_features())
    raw = encode_checkpoint(ckpt)
    assert raw[:4] == b"FSR1"
    with pytest.raises(CacheError):
        decode_checkpoint(raw[:-10])
    with pytest.raises(CacheError):
        decode_checkpoint(b"NOPE" + raw[4:])


def test_checkpoint_shape_mismatch_detected_before_compute():
    ckpt = train_on_features(desk(steps=2), synthetic_features())
    ckpt.tensors["proj.embed.weight"] = torch.zeros(3, 3)
    with pytest.raises(CacheError, match="shape mismatch"):
        ckpt.build_model()
    with pytest.raises(CacheError, match="architecture mismatch"):
        ckpt.check_config(ckpt.config.replace(width=32, heads=4))


def test_divergence_reported():
    feats = synthetic_features()
    feats[0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError, match="numerical divergence at step"):
        train_on_features(desk(), feats)


def test_empty_training_set():
    with pytest.raises(ConfigError):
        train_on_features(desk(), torch.empty(0, 48, 16, 16))


def test_separable_case_gives_perfect_image_auroc():
    """Normals are restored exactly, anomalies badly, by construction."""
    from fsr.scoring import anomaly_maps, auroc

    g = torch.Generator().manual_seed(0)
    normal = torch.randn(5, 8, 4, 4, generator=g)
    anomalous = torch.randn(5, 8, 4, 4, generator=g)
    feats = torch.cat([normal, anomalous])
    restored = torch.cat([normal, anomalous + torch.randn(5, 8, 4, 4, generator=g)])
    maps = anomaly_maps(feats, restored, 16)
    assert auroc([m.image_score for m in maps], [0] * 5 + [1] * 5) == 1.0


@pytest.fixture(scope="module")
def trained_run(texture_tree, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = desk(steps=60, batch_size=8, out=str(out), data=str(texture_tree))
    indices = [scan_dataset(texture_tree, c) for c in list_categories(texture_tree)]
    ckpts = train(cfg, build_setting(indices, cfg.setting))
    return cfg, indices, ckpts, out


def test_train_separate_writes_per_category(trained_run):
    cfg, indices, ckpts, out = trained_run
    assert [c.state["name"] for c in ckpts] == [ix.category for ix in indices]
    for ix in indices:
        assert (out / ix.category / "model.fsr").is_file()
        assert (out / ix.category / "loss.csv").is_file()


def test_evaluate_is_repeatable_and_never_shuffles(trained_run):
    cfg, indices, ckpts, out = trained_run
    ckpt = load_checkpoint(out / indices[0].category / "model.fsr")
    core.reset_shuffle_counter()
    a = evaluate(ckpt, indices[:1])
    b = evaluate(ckpt, indices[:1])
    assert core.SHUFFLE_CALLS == 0
    assert a.to_dict() == b.to_dict()
    m = a.categories[indices[0].category]
    assert 0 <= m.image_auroc <= 1 and 0 <= m.pixel_auroc <= 1
    assert (m.n_normal, m.n_anomalous) == (4, 4)


def test_predict_outputs(trained_run, tmp_path):
    cfg, indices, ckpts, out = trained_run
    ckpt = load_checkpoint(out / indices[0].category / "model.fsr")
    image = indices[0].test_images[-1].path
    core.reset_shuffle_counter()
    amap = predict(ckpt, image, tmp_path)
    assert core.SHUFFLE_CALLS == 0
    raster = read_feature_cache(tmp_path / f"{image.stem}_map.fsrf", "anomaly_map")
    assert np.array_equal(raster.data[0].numpy(), amap.pixel_scores)
    assert (tmp_path / f"{image.stem}_heatmap.png").is_file()
    assert amap.image_score == pytest.approx(float(np.std(amap.pixel_scores, dtype=np.float64)))


def test_feature_cache_used(texture_tree, tmp_path):
    cfg = desk(steps=2, feature_cache=str(tmp_path / "cache"), out=str(tmp_path / "o"))
    ix = scan_dataset(texture_tree, list_categories(texture_tree)[0])
    sets = build_setting([ix], SettingSpec("separate"))
    first = train(cfg, sets)[0]
    assert len(list((tmp_path / "cache").glob("*.fsrf"))) == len(ix.train_images)
    second = train(cfg, sets)[0]
    assert all(torch.equal(first.tensors[k], second.tensors[k]) for k in first.tensors)


def test_every_model_parameter_gets_gradient():
    from fsr.objective import restoration_loss

    model = FSRModel(48, 16, 2, 2, 64, 4, pos_embed="learnable", seed=3)
    feats = synthetic_features(n=2)
    restored, _ = model(feats, tau=0.3, rng=np.random.default_rng(0))
    restoration_loss(feats, restored).total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().gt(0).any()]
    assert dead == []
