import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexsep.branchformer import BranchformerBlock, BranchformerEncoder, ConvGatingUnit
from flexsep.numerics import ContractError, Tensor, backward, check_gradients, ops

from test_numerics import attention_loops, depthwise_loops, layer_norm_two_pass


def gelu_np(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def block(rng, dim=8, hidden=32, heads=2, kernel=3, **kw):
    return BranchformerBlock(dim, hidden, heads, kernel, rng, dtype=np.float64, **kw)


def mhsa_oracle(blk, x):
    """Per-head loop attention on a single [L, D] sequence."""
    h = layer_norm_two_pass(x, blk.attn_norm.gamma.data, blk.attn_norm.beta.data)
    qkv = h @ blk.attn.qkv.weight.data + blk.attn.qkv.bias.data
    dim = x.shape[1]
    heads = blk.attn.heads
    d = dim // heads
    q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
    # qkv columns are laid out [3, H, d]
    outs = [attention_loops(q[:, i * d:(i + 1) * d], k[:, i * d:(i + 1) * d], v[:, i * d:(i + 1) * d],
                            1 / math.sqrt(d)) for i in range(heads)]
    return np.concatenate(outs, axis=1) @ blk.attn.proj.weight.data + blk.attn.proj.bias.data


def csgu_oracle(unit, z):
    half = z.shape[1] // 2
    z2 = layer_norm_two_pass(z[:, half:], unit.norm.gamma.data, unit.norm.beta.data)
    gate = depthwise_loops(z2.T, unit.conv_weight.data).T + unit.conv_bias.data
    return z[:, :half] * gate


def cgmlp_oracle(blk, x):
    h = layer_norm_two_pass(x, blk.mlp_norm.gamma.data, blk.mlp_norm.beta.data)
    z = gelu_np(h @ blk.up.weight.data + blk.up.bias.data)
    return csgu_oracle(blk.csgu, z) @ blk.down.weight.data + blk.down.bias.data


def test_mhsa_matches_loop_oracle(rng):
    blk = block(rng, dim=4, heads=2)
    x = rng.normal(size=(3, 4))
    got = blk.mhsa_branch(Tensor(x[None])).data[0]
    assert np.max(np.abs(got - mhsa_oracle(blk, x))) < 1e-10


def test_mhsa_single_key(rng):
    blk = block(rng)
    x = rng.normal(size=(1, 1, 8))
    out, w = blk.mhsa_branch(Tensor(x), return_weights=True)
    np.testing.assert_array_equal(w, np.ones_like(w))
    h = layer_norm_two_pass(x[0], blk.attn_norm.gamma.data, blk.attn_norm.beta.data)
    v = (h @ blk.attn.qkv.weight.data + blk.attn.qkv.bias.data)[:, 16:]
    expected = v @ blk.attn.proj.weight.data + blk.attn.proj.bias.data
    assert np.max(np.abs(out.data[0] - expected)) < 1e-12


def test_mhsa_rows_sum_to_one(rng):
    _, w = block(rng).mhsa_branch(Tensor(rng.normal(size=(2, 9, 8))), return_weights=True)
    assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-6


def test_heads_must_divide_dim(rng):
    with pytest.raises(ContractError, match="divisible"):
        block(rng, dim=6, heads=4)


def test_csgu_constant_second_half_zero_gate(rng):
    unit = ConvGatingUnit(8, 3, rng, dtype=np.float64)
    unit.conv_bias.data[:] = 0.0
    z = np.concatenate([rng.normal(size=(5, 4)), np.full((5, 4), 2.0)], axis=1)
    assert not np.any(unit(Tensor(z)).data)


def test_csgu_identity_gate(rng):
    unit = ConvGatingUnit(8, 3, rng, dtype=np.float64)
    unit.conv_weight.data[:] = 0.0
    unit.conv_bias.data[:] = 1.0
    z = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(unit(Tensor(z)).data, z[:, :4])


def test_csgu_matches_oracle_composition(rng):
    unit = ConvGatingUnit(8, 5, rng, dtype=np.float64)
    unit.conv_weight.data = rng.normal(size=unit.conv_weight.shape)
    z = rng.normal(size=(7, 8))
    assert np.max(np.abs(unit(Tensor(z)).data - csgu_oracle(unit, z))) < 1e-10


def test_csgu_rejects_odd_width(rng):
    with pytest.raises(ContractError, match="even"):
        ConvGatingUnit(7, 3, rng)
    unit = ConvGatingUnit(8, 3, rng, dtype=np.float64)
    with pytest.raises(ContractError, match="even"):
        unit(Tensor(np.ones((3, 5))))


def test_cgmlp_zero_input(rng):
    blk = block(rng)
    assert not np.any(blk.cgmlp_branch(Tensor(np.zeros((1, 5, 8)))).data)


def test_cgmlp_shape_and_oracle(rng):
    blk = block(rng, dim=8, hidden=32)
    blk.csgu.conv_weight.data = rng.normal(size=blk.csgu.conv_weight.shape)
    x = rng.normal(size=(5, 8))
    out = blk.cgmlp_branch(Tensor(x[None])).data[0]
    assert out.shape == (5, 8)
    assert np.max(np.abs(out - cgmlp_oracle(blk, x))) < 1e-9


def test_alpha_boundaries_are_exact(rng):
    x = Tensor(rng.normal(size=(1, 6, 8)))
    one = block(np.random.default_rng(3), alpha_override=1.0)
    np.testing.assert_array_equal(one(x).data, (x + one.mhsa_branch(x)).data)
    zero = block(np.random.default_rng(3), alpha_override=0.0)
    np.testing.assert_array_equal(zero(x).data, (x + zero.cgmlp_branch(x)).data)


def test_half_alpha_weighted_sum(rng):
    blk = block(rng)
    x = rng.normal(size=(6, 8))
    expected = x + 0.5 * mhsa_oracle(blk, x) + 0.5 * cgmlp_oracle(blk, x)
    assert float(blk.alpha().data) == 0.5
    assert np.max(np.abs(blk(Tensor(x[None])).data[0] - expected)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.floats(-6.0, 6.0), st.integers(1, 9))
def test_merge_is_convex_combination(logit, length):
    r = np.random.default_rng(length)
    blk = block(r)
    blk.alpha_logit.data = np.asarray(logit)
    x = Tensor(r.normal(size=(1, length, 8)))
    a = float(blk.alpha().data)
    assert 0.0 < a < 1.0
    expected = x.data + a * blk.mhsa_branch(x).data + (1 - a) * blk.cgmlp_branch(x).data
    assert np.max(np.abs(blk(x).data - expected)) < 1e-10


@pytest.mark.parametrize("n_blocks", [1, 2, 3])
def test_encoder_preserves_shape(rng, n_blocks):
    enc = BranchformerEncoder(8, 16, 2, 3, n_blocks, rng, dtype=np.float64)
    assert enc(Tensor(rng.normal(size=(2, 7, 8)))).shape == (2, 7, 8)


def test_block_gradients(rng):
    blk = block(rng, dim=4, hidden=8, heads=2)
    blk.alpha_logit.data = np.asarray(0.3)
    x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    params = [x, blk.alpha_logit, blk.up.weight, blk.csgu.conv_weight, blk.attn.qkv.weight, blk.down.bias]
    w = Tensor(rng.normal(size=(1, 3, 4)))
    errors = check_gradients(lambda: ops.sum(blk(x) * w), params)
    assert max(errors.values()) < 1e-3, errors


def test_csgu_gradients(rng):
    unit = ConvGatingUnit(6, 3, rng, dtype=np.float64)
    z = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)))
    errors = check_gradients(lambda: ops.sum(unit(z) * w), [z, unit.conv_weight, unit.conv_bias, unit.norm.gamma])
    assert max(errors.values()) < 1e-3


def test_alpha_receives_gradient_when_branches_differ(rng):
    blk = block(rng)
    x = Tensor(rng.normal(size=(1, 6, 8)))
    target = (x + blk.mhsa_branch(x)).data
    diff = blk(x) - Tensor(target)
    backward(ops.sum(diff * diff))
    assert abs(float(blk.alpha_logit.grad)) > 0
