import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fsr.core import positional_table, random_shuffle
from fsr.errors import ConfigError
from fsr.restoration import block_forward, init_params, param_count, restore, zero_output_projections

from gradcheck_util import central_diff, max_rel_error


def test_default_architecture_param_count():
    net = init_params(8, 768, 12, 4.0, seed=0)
    counted = sum(p.numel() for p in net.parameters())
    assert counted == param_count(8, 768, 4.0) == 8 * (12 * 768**2 + 13 * 768)


@pytest.mark.parametrize("n,d,h,r", [(2, 64, 4, 4.0), (1, 16, 2, 2.0), (3, 24, 3, 1.5)])
def test_param_count_formula(n, d, h, r):
    assert sum(p.numel() for p in init_params(n, d, h, r).parameters()) == param_count(n, d, r)


def test_seeded_init_is_bit_identical():
    a, b = init_params(2, 64, 4, seed=3), init_params(2, 64, 4, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        init_params(2, 10, 3)


def test_zeroed_block_is_identity():
    net = zero_output_projections(init_params(1, 16, 2, seed=0))
    x = torch.randn(7, 16)
    out, _ = block_forward(x, net.blocks[0])
    assert torch.equal(out, x)


def test_single_token_attention():
    net = init_params(1, 16, 4, seed=0)
    _, attn = block_forward(torch.randn(1, 16), net.blocks[0])
    assert attn.shape == (4, 1, 1)
    assert torch.all(attn == 1.0)


def test_attention_rows_stochastic():
    net = init_params(3, 32, 4, seed=1)
    _, trace = restore(torch.randn(2, 11, 32) * 3, net, trace=True)
    assert len(trace) == 3
    for a in trace:
        assert a.shape == (2, 4, 11, 11)
        assert torch.all(a >= 0)
        torch.testing.assert_close(a.sum(-1), torch.ones(2, 4, 11), atol=1e-5, rtol=0)


def test_trace_off_by_default():
    _, trace = restore(torch.randn(5, 16), init_params(1, 16, 2))
    assert trace is None


def test_depth_zero_identity():
    x = torch.randn(4, 16)
    out, _ = restore(x, init_params(0, 16, 2))
    assert torch.equal(out, x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_zeroed_network_identity_any_input(seed):
    net = zero_output_projections(init_params(3, 16, 4, seed=seed % 7))
    x = torch.randn(6, 16, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(restore(x, net)[0], x)


def test_input_gradient_matches_finite_differences():
    net = init_params(2, 16, 4, seed=0).double()
    with torch.no_grad():
        # larger output weights so the check is not dominated by the residual identity
        for b in net.blocks:
            b.proj.weight.normal_(0, 0.3)
            b.fc2.weight.normal_(0, 0.3)
    x = torch.randn(9, 16, dtype=torch.float64, requires_grad=True)
    restore(x, net)[0].sum().backward()
    xn = x.detach().clone()
    numeric = central_diff(lambda: restore(xn, net)[0].sum(), xn)
    assert max_rel_error(x.grad, numeric) < 1e-4


def test_permutation_equivariance_without_positions():
    net = init_params(2, 16, 4, seed=2)
    x = torch.randn(10, 16)
    perm = torch.randperm(10, generator=torch.Generator().manual_seed(0))
    out = restore(x, net)[0]
    torch.testing.assert_close(restore(x[perm], net)[0], out[perm], atol=1e-5, rtol=0)
    # positions added by slot break the symmetry
    table = positional_table(10, 16)
    with_pos = restore(x + table, net)[0]
    assert not torch.allclose(restore(x[perm] + table, net)[0], with_pos[perm], atol=1e-5)


def test_zero_shortcut_witness_token_level():
    net = zero_output_projections(init_params(2, 16, 4))
    x = torch.randn(12, 16)
    shuffled, rec = random_shuffle(x, 1.0, np.random.default_rng(4))
    assert torch.linalg.norm(restore(x, net)[0] - x) == 0
    fsr = torch.linalg.norm(restore(shuffled, net)[0] - x)
    assert fsr == torch.linalg.norm(shuffled - x) > 0


def test_all_params_gradient_matches_finite_differences():
    from gradcheck_util import restoration_param_check

    feat_err, param_err, dead = restoration_param_check()
    assert dead == []
    assert feat_err < 1e-4
    assert param_err < 1e-4
