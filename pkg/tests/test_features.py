import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fsr.errors import CacheError, ConfigError
from fsr.features import (
    WideResNetBackbone,
    extract_stages,
    fuse_features,
    make_synthetic_backbone,
    parse_stage_spec,
    read_feature_cache,
    write_feature_cache,
)


def test_synthetic_stage_sizes():
    ext = make_synthetic_backbone(0, [(8, 2), (16, 4)])
    outs = extract_stages(torch.randn(3, 32, 32), ext, [0, 1])
    assert [tuple(o.shape) for o in outs] == [(8, 16, 16), (16, 8, 8)]


def test_stride_arithmetic_256():
    ext = make_synthetic_backbone(0, [(4, 4), (4, 8), (4, 16)])
    outs = extract_stages(torch.randn(1, 3, 256, 256), ext)
    assert [o.shape[-1] for o in outs] == [64, 32, 16]


def test_synthetic_deterministic_and_seed_sensitive():
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    a = make_synthetic_backbone(5, [(8, 2)])
    b = make_synthetic_backbone(5, [(8, 2)])
    c = make_synthetic_backbone(6, [(8, 2)])
    assert a.descriptor == b.descriptor != c.descriptor
    assert torch.equal(extract_stages(x, a)[0], extract_stages(x, b)[0])
    assert not torch.allclose(extract_stages(x, a)[0], extract_stages(x, c)[0])


def test_invalid_stage_id():
    ext = make_synthetic_backbone(0, [(8, 2)])
    with pytest.raises(ConfigError):
        extract_stages(torch.randn(3, 16, 16), ext, [1])


def test_extractor_frozen():
    ext = make_synthetic_backbone(0, [(8, 2)])
    assert all(not p.requires_grad for p in ext.parameters())
    x = torch.randn(1, 3, 16, 16, requires_grad=True)
    assert not extract_stages(x, ext)[0].requires_grad
    ext.train()
    assert not ext.training


def test_wide_resnet_default_channels():
    ext = WideResNetBackbone()
    assert ext.stage_channels == (256, 512, 1024)
    assert sum(ext.stage_channels) == 1792
    outs = extract_stages(torch.randn(1, 3, 64, 64), ext)
    assert [o.shape[1] for o in outs] == [256, 512, 1024]
    assert [o.shape[-1] for o in outs] == [16, 8, 4]
    fused = fuse_features(outs, 16)
    assert fused.shape == (1, 1792, 16, 16)


def test_fuse_identity_single_stage():
    m = torch.randn(5, 8, 8)
    assert torch.equal(fuse_features([m], (8, 8)), m)


def test_fuse_constant_order():
    a = torch.full((1, 4, 4), 2.0)
    b = torch.full((1, 2, 2), -3.0)
    out = fuse_features([a, b], 4)
    assert out.shape == (2, 4, 4)
    assert torch.all(out[0] == 2.0) and torch.allclose(out[1], torch.tensor(-3.0))


def test_fuse_channel_sum():
    maps = [torch.zeros(1, c, s, s) for c, s in ((256, 64), (512, 32), (1024, 16))]
    assert fuse_features(maps, 64).shape == (1, 1792, 64, 64)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_fuse_commutes_with_scaling(c, seed):
    g = torch.Generator().manual_seed(seed)
    maps = [torch.randn(1, 3, 8, 8, generator=g), torch.randn(1, 2, 4, 4, generator=g)]
    lhs = fuse_features([c * m for m in maps], 8)
    rhs = c * fuse_features(maps, 8)
    torch.testing.assert_close(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_parse_stage_spec():
    assert parse_stage_spec("16:2,32:4") == [(16, 2), (32, 4)]
    with pytest.raises(ConfigError):
        parse_stage_spec("16-2")


def test_cache_round_trip(tmp_path):
    m = torch.randn(7, 5, 3)
    write_feature_cache(m, tmp_path / "f.fsrf", "synthetic:seed=0", "img.png")
    back = read_feature_cache(tmp_path / "f.fsrf", "synthetic:seed=0")
    assert torch.equal(back.data, m)
    assert back.source == "img.png"
    raw = (tmp_path / "f.fsrf").read_bytes()
    assert raw[:4] == b"FSRF"
    # payload is H-major, then W, then channel
    payload = torch.frombuffer(bytearray(raw[-7 * 5 * 3 * 4 :]), dtype=torch.float32)
    assert torch.equal(payload.reshape(5, 3, 7), m.permute(1, 2, 0))


def test_cache_descriptor_mismatch(tmp_path):
    write_feature_cache(torch.zeros(1, 2, 2), tmp_path / "f.fsrf", "a")
    with pytest.raises(CacheError, match="descriptor mismatch"):
        read_feature_cache(tmp_path / "f.fsrf", "b")


def test_cache_truncated(tmp_path):
    p = tmp_path / "f.fsrf"
    write_feature_cache(torch.zeros(4, 4, 4), p, "a")
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CacheError):
        read_feature_cache(p)
    p.write_bytes(b"FSRF\x01")
    with pytest.raises(CacheError):
        read_feature_cache(p)
    p.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(CacheError):
        read_feature_cache(p)
