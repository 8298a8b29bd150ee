"""Bypass projections, windowing, and the attention blocks."""

import numpy as np
import pytest

from skim import attention as A
from skim import tensor as T
from skim.errors import ShapeError


def rand(shape, seed=0):
    return T.Rng(seed).gaussian(int(np.prod(shape)), 0.0, 0.5).reshape(shape)


def plain(din, dout, seed=0):
    return A.BypassLinear(W=T.from_array(rand((din, dout), seed)),
                          b=T.from_array(rand((dout,), seed + 1) * 0.1))


def with_bypass(din, dout, r, seed=0, zero=True):
    w1 = T.from_array(rand((din, r), seed + 2) * 0.02)
    w2 = T.from_array(np.zeros((r, dout), dtype=np.float32) if zero
                      else rand((r, dout), seed + 3) * 0.02)
    p = plain(din, dout, seed)
    return A.BypassLinear(W=p.W, b=p.b, W1=w1, W2=w2, r=r, enabled=True)


def attn_params(dim, heads, window=None, bypass=False):
    d_k = dim // heads
    q = with_bypass(dim, dim, 2, 10, zero=False) if bypass else plain(dim, dim, 10)
    v = with_bypass(dim, dim, 2, 30, zero=False) if bypass else plain(dim, dim, 30)
    return A.AttentionParams(heads=heads, d_k=d_k, q_proj=q,
                             k_proj=plain(dim, dim, 20),
                             v_proj=v, out_proj=plain(dim, dim, 40),
                             window=window)


# ---------------------------------------------------------------------------
# bypass linear

def test_zero_second_factor_matches_plain_exactly():
    x = T.from_array(rand((5, 8), 1))
    base = plain(8, 6, 7)
    lora = A.BypassLinear(W=base.W, b=base.b,
                          W1=T.from_array(rand((8, 3), 8) * 0.02),
                          W2=T.from_array(np.zeros((3, 6), dtype=np.float32)),
                          r=3, enabled=True)
    got = A.bypass_linear_forward(x, lora).data
    want = A.bypass_linear_forward(x, base).data
    assert np.array_equal(got, want)  # bit-exact, not just close


def test_bypass_adds_low_rank_term():
    x = T.from_array(rand((4, 8), 2))
    p = with_bypass(8, 6, 2, 9, zero=False)
    got = A.bypass_linear_forward(x, p).data
    base = x.data @ p.W.data + p.b.data
    extra = x.data @ p.W1.data @ p.W2.data
    assert np.allclose(got, base + extra, atol=1e-6)


def test_bypass_extent_validation():
    with pytest.raises(ShapeError):
        A.BypassLinear(W=T.zeros((8, 6)), b=T.zeros((6,)),
                       W1=T.zeros((8, 3)), W2=T.zeros((4, 6)), r=3, enabled=True)
    with pytest.raises(ShapeError):
        A.BypassLinear(W=T.zeros((8, 6)), b=T.zeros((6,)),
                       W1=None, W2=None, r=3, enabled=True)


def test_k_projection_rejects_bypass():
    with pytest.raises(ShapeError):
        A.AttentionParams(heads=2, d_k=4,
                          q_proj=plain(8, 8), k_proj=with_bypass(8, 8, 2),
                          v_proj=plain(8, 8), out_proj=plain(8, 8))


def test_rank_bound_property():
    # the bypass contribution is a rank-<=r update regardless of the data
    for r in (1, 2, 4):
        p = with_bypass(16, 16, r, seed=50 + r, zero=False)
        delta = p.W1.data @ p.W2.data
        assert np.linalg.matrix_rank(delta) <= r


# ---------------------------------------------------------------------------
# windowing

def test_window_partition_merge_roundtrip():
    x = T.from_array(rand((4, 4, 3), 3))
    tiles = A.window_partition(x, 2)
    assert tiles.shape == (4, 2, 2, 3)
    back = A.window_merge(tiles, 4, 4)
    assert np.array_equal(back.data, x.data)


def test_window_whole_grid_is_single_tile():
    x = T.from_array(rand((4, 4, 3), 4))
    tiles = A.window_partition(x, 4)
    assert tiles.shape == (1, 4, 4, 3)
    assert np.array_equal(tiles.data[0], x.data)


def test_window_row_major_tile_order():
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    tiles = A.window_partition(T.from_array(x), 2).data
    assert np.array_equal(tiles[0, :, :, 0], [[0, 1], [4, 5]])
    assert np.array_equal(tiles[1, :, :, 0], [[2, 3], [6, 7]])
    assert np.array_equal(tiles[2, :, :, 0], [[8, 9], [12, 13]])


def test_window_indivisible_rejected():
    with pytest.raises(ShapeError):
        A.window_partition(T.zeros((5, 4, 3)), 2)


def test_window_partition_batched():
    x = T.from_array(rand((2, 4, 4, 3), 5))
    tiles = A.window_partition(x, 2)
    assert tiles.shape == (8, 2, 2, 3)
    back = A.window_merge(tiles, 4, 4, batch=2)
    assert np.array_equal(back.data, x.data)


# ---------------------------------------------------------------------------
# attention

def test_attention_identical_tokens_yield_identical_outputs():
    row = rand((1, 8), 6)
    x = T.from_array(np.repeat(row, 3, axis=0))
    out = A.attention_tokens(x, attn_params(8, 2)).data
    assert np.allclose(out[0], out[1], atol=1e-6)
    assert np.allclose(out[0], out[2], atol=1e-6)


def test_attention_matches_explicit_loop_oracle():
    dim, heads, n = 6, 2, 3
    p = attn_params(dim, heads)
    x = rand((n, dim), 7)
    got = A.attention_tokens(T.from_array(x), p).data

    d_k = dim // heads
    q = x @ p.q_proj.W.data + p.q_proj.b.data
    k = x @ p.k_proj.W.data + p.k_proj.b.data
    v = x @ p.v_proj.W.data + p.v_proj.b.data
    merged = np.zeros((n, dim), dtype=np.float64)
    for h in range(heads):
        sl = slice(h * d_k, (h + 1) * d_k)
        qs, ks, vs = q[:, sl], k[:, sl], v[:, sl]
        scores = qs @ ks.T / np.sqrt(d_k)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        merged[:, sl] = w @ vs
    want = merged @ p.out_proj.W.data + p.out_proj.b.data
    assert np.allclose(got, want, atol=1e-5)


def test_windowed_equals_global_when_window_covers_grid():
    dim = 8
    x = T.from_array(rand((4, 4, dim), 8))
    pw = attn_params(dim, 2, window=4)
    pg = attn_params(dim, 2, window=None)
    got_w = A.attention_forward(x, pw).data
    got_g = A.attention_forward(x, pg).data
    assert np.allclose(got_w, got_g, atol=1e-5)


def test_windowed_attention_is_local():
    # a perturbation inside one window must not affect other windows
    dim = 8
    base = rand((4, 4, dim), 9)
    p = attn_params(dim, 2, window=2)
    out1 = A.attention_forward(T.from_array(base), p).data
    bumped = base.copy()
    bumped[0, 0] += 3.0
    out2 = A.attention_forward(T.from_array(bumped), p).data
    assert not np.allclose(out1[:2, :2], out2[:2, :2], atol=1e-6)
    assert np.allclose(out1[2:, 2:], out2[2:, 2:], atol=1e-7)


def test_cross_attention_uses_kv_source():
    dim = 8
    p = attn_params(dim, 2)
    x = T.from_array(rand((2, dim), 11))
    kv1 = T.from_array(rand((5, dim), 12))
    kv2 = T.from_array(rand((5, dim), 13))
    o1 = A.attention_tokens(x, p, kv=kv1).data
    o2 = A.attention_tokens(x, p, kv=kv2).data
    assert o1.shape == (2, dim)
    assert not np.allclose(o1, o2, atol=1e-6)


def test_attention_gradients_flow_to_bypass_factors():
    dim = 8
    p = attn_params(dim, 2, bypass=True)
    for t in (p.q_proj.W1, p.q_proj.W2, p.v_proj.W1, p.v_proj.W2):
        t.requires_grad = True
    x = T.from_array(rand((4, dim), 14))
    T.backward(T.reduce_sum(A.attention_tokens(x, p)))
    for t in (p.q_proj.W1, p.q_proj.W2, p.v_proj.W1, p.v_proj.W2):
        assert t.grad is not None
        assert np.any(t.grad != 0)


def test_attention_finite_diff():
    with T.precision("float64"):
        dim = 6
        p = attn_params(dim, 2)
        x = T.from_array(rand((3, dim), 15).astype(np.float64))
        x.requires_grad = True
        err = T.finite_diff_check(
            lambda t: T.reduce_sum(A.attention_tokens(t, p)), x)
        assert err < 1e-6
