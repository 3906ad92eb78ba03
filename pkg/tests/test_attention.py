import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockgate.attention import (
    AttentionInputs,
    attention_probs,
    dense_attention,
    ground_truth_fused,
    ground_truth_fused_varlen,
    ground_truth_naive,
    streaming_attention,
)
from blockgate.errors import ShapeError
from blockgate.tensor import ModelShape


def make(shape, q_len, kv_len, seed, offset=None, scale=1.0):
    rng = np.random.default_rng(seed)
    offset = kv_len - q_len if offset is None else offset
    return AttentionInputs(
        q=scale * rng.standard_normal((shape.num_q_heads, q_len, shape.head_dim)),
        k=scale * rng.standard_normal((shape.num_kv_heads, kv_len, shape.head_dim)),
        v=rng.standard_normal((shape.num_kv_heads, kv_len, shape.head_dim)),
        causal_offset=offset,
    )


def loop_attention(inp, shape):
    out = np.zeros(inp.q.shape)
    for h in range(shape.num_q_heads):
        kv = h // shape.group_size
        for i in range(inp.q_len):
            p = inp.causal_offset + i
            s = [float(np.dot(inp.q[h, i].astype(np.float64), inp.k[kv, t])) / math.sqrt(shape.head_dim) for t in range(p + 1)]
            m = max(s)
            w = [math.exp(x - m) for x in s]
            z = sum(w)
            out[h, i] = sum(wt * inp.v[kv, t].astype(np.float64) for t, wt in enumerate(w)) / z
    return out


def staged_gt(inp, shape):
    b = shape.block_size
    probs = attention_probs(inp, shape).astype(np.float64)
    nb = -(-inp.kv_len // b)
    m = np.zeros((shape.num_q_heads, inp.q_len, nb))
    for j in range(nb):
        m[..., j] = probs[..., j * b : (j + 1) * b].max(-1)
    g = m.reshape(shape.num_kv_heads, shape.group_size, inp.q_len, nb).max(1)
    return g / g.sum(-1, keepdims=True)


SH = ModelShape(num_kv_heads=2, group_size=2, head_dim=8, block_size=4)


class TestDense:
    def test_single_key(self):
        inp = make(SH, 1, 1, 0)
        out = dense_attention(inp, SH)
        for h in range(SH.num_q_heads):
            np.testing.assert_allclose(out[h, 0], inp.v[h // 2, 0], rtol=1e-6)

    def test_identical_keys_average_values(self):
        inp = make(SH, 1, 5, 1)
        inp.k[:] = inp.k[:, :1]
        out = dense_attention(inp, SH)
        np.testing.assert_allclose(out[0, 0], inp.v[0].mean(0), rtol=1e-5, atol=1e-6)

    def test_loop_oracle(self):
        inp = make(SH, 3, 8, 2)
        np.testing.assert_allclose(dense_attention(inp, SH), loop_attention(inp, SH), atol=1e-5)

    def test_validation(self):
        inp = make(SH, 2, 4, 0)
        with pytest.raises(ShapeError):
            dense_attention(inp, ModelShape(num_kv_heads=3, group_size=2, head_dim=8, block_size=4))


class TestStreaming:
    @pytest.mark.parametrize("kv_len", [1, 3, 4, 5, 23])
    def test_matches_dense(self, kv_len):
        inp = make(SH, kv_len, kv_len, kv_len)
        np.testing.assert_allclose(streaming_attention(inp, SH), dense_attention(inp, SH), atol=1e-4, rtol=1e-4)

    def test_one_block_is_dense(self):
        inp = make(SH, 6, 6, 3)
        np.testing.assert_allclose(streaming_attention(inp, SH, kv_block=6), dense_attention(inp, SH), atol=1e-6)

    def test_partial_last_block(self):
        sh = ModelShape(num_kv_heads=1, group_size=2, head_dim=8, block_size=64)
        inp = make(sh, 130, 130, 4)
        np.testing.assert_allclose(streaming_attention(inp, sh), dense_attention(inp, sh), atol=1e-4, rtol=1e-4)


class TestGroundTruth:
    def test_single_block_all_ones(self):
        inp = make(SH, 3, 3, 0)
        gt = ground_truth_naive(inp, SH).gt
        np.testing.assert_array_equal(gt, np.ones_like(gt))
        _, fused = ground_truth_fused(inp, SH)
        np.testing.assert_array_equal(fused.gt, np.ones_like(gt))

    def test_staged_oracle(self):
        inp = make(SH, 4, 9, 5)
        np.testing.assert_allclose(ground_truth_naive(inp, SH).gt, staged_gt(inp, SH), atol=1e-6)

    def test_g1_no_group_reduction(self):
        sh = ModelShape(num_kv_heads=2, group_size=1, head_dim=8, block_size=4)
        inp = make(sh, 5, 9, 6)
        probs = attention_probs(inp, sh)
        m = np.stack([probs[..., j * 4 : (j + 1) * 4].max(-1) for j in range(3)], -1)
        np.testing.assert_allclose(ground_truth_naive(inp, sh).gt, m / m.sum(-1, keepdims=True), atol=1e-6)

    def test_increasing_scores_force_rescaling(self):
        sh = ModelShape(num_kv_heads=1, group_size=2, head_dim=4, block_size=4)
        n = 20
        q = np.ones((2, 1, 4), np.float32)
        k = np.repeat(np.linspace(0, 8, n, dtype=np.float32)[None, :, None], 4, axis=2)
        v = np.random.default_rng(0).standard_normal((1, n, 4))
        inp = AttentionInputs(q, k, v, causal_offset=n - 1)
        out, fused = ground_truth_fused(inp, sh)
        np.testing.assert_allclose(fused.gt, ground_truth_naive(inp, sh).gt, atol=1e-5)
        np.testing.assert_allclose(out, dense_attention(inp, sh), atol=1e-4)

    @given(
        st.integers(0, 10_000),
        st.sampled_from([1, 2, 4]),
        st.sampled_from([4, 8]),
        st.integers(1, 30),
        st.floats(0.1, 4.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_fused_equals_naive_and_rows_normalized(self, seed, g, b, n, scale):
        sh = ModelShape(num_kv_heads=2, group_size=g, head_dim=8, block_size=b)
        inp = make(sh, n, n, seed, scale=scale)
        naive = ground_truth_naive(inp, sh).gt
        out, fused = ground_truth_fused(inp, sh)
        np.testing.assert_allclose(fused.gt, naive, atol=1e-5)
        np.testing.assert_allclose(out, dense_attention(inp, sh), atol=1e-4, rtol=1e-4)
        assert np.all((naive >= 0) & (naive <= 1))
        np.testing.assert_allclose(naive.sum(-1), 1.0, atol=1e-5)
        # blocks starting after the query position are exactly zero
        future = (np.arange(naive.shape[-1]) * b)[None, :] > inp.positions[:, None]
        assert np.all(naive[:, future] == 0)

    def test_offset_queries(self):
        inp = make(SH, 3, 11, 9, offset=4)
        _, fused = ground_truth_fused(inp, SH)
        np.testing.assert_allclose(fused.gt, staged_gt(inp, SH), atol=1e-5)

    def test_varlen_matches_per_sequence(self):
        rng = np.random.default_rng(7)
        lens = [5, 9, 3]
        total = sum(lens)
        q = rng.standard_normal((SH.num_q_heads, total, 8))
        k = rng.standard_normal((SH.num_kv_heads, total, 8))
        v = rng.standard_normal((SH.num_kv_heads, total, 8))
        cu = np.concatenate([[0], np.cumsum(lens)])
        out, maps = ground_truth_fused_varlen(q, k, v, cu, SH)
        for (lo, hi), gt in zip(zip(cu, cu[1:]), maps):
            seg = AttentionInputs(q[:, lo:hi], k[:, lo:hi], v[:, lo:hi])
            np.testing.assert_allclose(gt.gt, ground_truth_naive(seg, SH).gt, atol=1e-5)
            np.testing.assert_allclose(out[:, lo:hi], dense_attention(seg, SH), atol=1e-4)

    def test_varlen_bad_bounds(self):
        z = np.zeros((4, 6, 8))
        with pytest.raises(ShapeError):
            ground_truth_fused_varlen(z, z[:2], z[:2], [0, 7], SH)
