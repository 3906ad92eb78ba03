import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockgate.attention import AttentionInputs, dense_attention, ground_truth_naive
from blockgate.corpus import synth_qk
from blockgate.decode import (
    BlockSelection,
    DecodeSession,
    KCompressionCache,
    SparsifyPolicy,
    cache_append,
    quest_metadata,
    quest_scores,
    select_blocks,
    sparse_decode,
)
from blockgate.errors import ShapeError
from blockgate.gate import gate_forward_k, init_gate_params
from blockgate.tensor import ModelShape

SH = ModelShape(num_kv_heads=2, group_size=2, head_dim=8, block_size=4)


def rand_kv(shape, n, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((shape.num_q_heads, 1, shape.head_dim)).astype(np.float32)
    k = rng.standard_normal((shape.num_kv_heads, n, shape.head_dim)).astype(np.float32)
    v = rng.standard_normal((shape.num_kv_heads, n, shape.head_dim)).astype(np.float32)
    return q, k, v


def dense_row(q, k, v, shape):
    n = k.shape[1]
    return dense_attention(AttentionInputs(q, k, v, causal_offset=n - 1), shape)


def all_blocks(shape, n, batch=1):
    nb = shape.num_blocks(n)
    return BlockSelection([[np.arange(nb)] * shape.num_kv_heads] * batch, [n] * batch, shape.block_size)


class TestCache:
    def test_one_row_at_a_time(self):
        p = init_gate_params(SH, 0)
        k = np.random.default_rng(0).standard_normal((2, 4, 8)).astype(np.float32)
        cache = KCompressionCache(SH, p)
        for t in range(4):
            cache_append(cache, k[:, t : t + 1], p, SH)
        np.testing.assert_array_equal(cache.compressed, gate_forward_k(k, p, SH))

    def test_partial_block_pending(self):
        p = init_gate_params(SH, 0)
        cache = KCompressionCache(SH, p).append(np.ones((2, 3, 8)))
        assert cache.num_blocks == 0 and cache.raw_tail.shape[1] == 3 and cache.finalized_len == 0

    def test_interleaved_sizes(self):
        p = init_gate_params(SH, 1)
        k = np.random.default_rng(1).standard_normal((2, 12, 8)).astype(np.float32)
        cache = KCompressionCache(SH, p, capacity_blocks=1)
        for lo, hi in [(0, 3), (3, 4), (4, 12)]:
            cache.append(k[:, lo:hi])
        np.testing.assert_array_equal(cache.compressed, gate_forward_k(k, p, SH))
        assert cache.finalized_len == 12 and cache.raw_tail.shape[1] == 0

    @given(st.lists(st.integers(0, 9), min_size=1, max_size=12), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_any_schedule_matches_recompute(self, sizes, seed):
        p = init_gate_params(SH, seed)
        total = sum(sizes)
        k = np.random.default_rng(seed).standard_normal((2, max(total, 1), 8)).astype(np.float32)
        cache = KCompressionCache(SH, p, capacity_blocks=2)
        t = 0
        for n in sizes:
            cache.append(k[:, t : t + n])
            t += n
        full = total // 4
        assert cache.finalized_len == full * 4 == cache.num_blocks * 4
        assert cache.raw_tail.shape[1] == total - full * 4 < 4
        if full:
            assert cache.compressed.tobytes() == gate_forward_k(k[:, : full * 4], p, SH).tobytes()

    def test_memory_ratio(self):
        assert KCompressionCache.memory_ratio(ModelShape(head_dim=64, block_size=64)) == 1 / 128
        assert KCompressionCache.memory_ratio(ModelShape(head_dim=128, block_size=64)) == 1 / 128

    def test_wrong_params(self):
        p = init_gate_params(SH, 0)
        with pytest.raises(ValueError):
            cache_append(KCompressionCache(SH, p), np.ones((2, 1, 8)), init_gate_params(SH, 1), SH)


class TestPolicy:
    def test_validation(self):
        with pytest.raises(ValueError):
            SparsifyPolicy("budget", 4, budget=3)
        with pytest.raises(ValueError):
            SparsifyPolicy("threshold", 4, threshold=0.0)
        with pytest.raises(ValueError):
            SparsifyPolicy("bogus", 4)

    def test_budget_top_blocks_plus_newest(self):
        pol = SparsifyPolicy("budget", 4, budget=12)
        scores = np.array([[0.1, 0.9, 0.5, 0.7]])
        # seq_len 18 -> blocks 0..4, newest 4 (unscored, forced)
        assert select_blocks(pol, scores, 18)[0].tolist() == [1, 3, 4]

    def test_budget_covers_everything(self):
        pol = SparsifyPolicy("budget", 4, budget=100)
        assert select_blocks(pol, np.zeros((1, 4)), 17)[0].tolist() == [0, 1, 2, 3, 4]

    def test_threshold_one_keeps_only_newest(self):
        pol = SparsifyPolicy("threshold", 4, threshold=1.0)
        scores = np.array([[0.2, 0.3, 0.5]])
        assert select_blocks(pol, scores, 13)[0].tolist() == [3]

    def test_threshold(self):
        pol = SparsifyPolicy("threshold", 4, threshold=0.25)
        assert select_blocks(pol, np.array([[0.2, 0.3, 0.5]]), 12)[0].tolist() == [1, 2]

    def test_exact_multiple_vs_one_more(self):
        pol = SparsifyPolicy("budget", 4, budget=4)
        assert select_blocks(pol, np.array([[1.0, 0.0]]), 8)[0].tolist() == [1]
        assert select_blocks(pol, np.array([[1.0, 0.0]]), 9)[0].tolist() == [2]

    def test_quest_hand_case(self):
        sh = ModelShape(num_kv_heads=1, group_size=1, head_dim=2, block_size=2)
        k = np.array([[[0.1, 0.0], [0.0, 0.1], [3.0, 1.0], [2.0, 2.0], [0.0, 0.0]]], np.float32)
        kmin, kmax = quest_metadata(k, 2, 2)
        s = quest_scores(np.array([[1.0, 1.0]]), kmin, kmax, sh)
        assert s[0, 1] > s[0, 0]
        assert s[0].tolist() == pytest.approx([0.2, 5.0])
        sel = select_blocks(SparsifyPolicy("quest", 2, budget=4), s, 5)
        assert sel[0].tolist() == [1, 2]

    def test_quest_is_an_upper_bound(self):
        rng = np.random.default_rng(0)
        sh = ModelShape(num_kv_heads=1, group_size=1, head_dim=6, block_size=4)
        k = rng.standard_normal((1, 16, 6)).astype(np.float32)
        q = rng.standard_normal((1, 6)).astype(np.float32)
        kmin, kmax = quest_metadata(k, 4)
        bound = quest_scores(q, kmin, kmax, sh)[0]
        true = (k[0] @ q[0]).reshape(4, 4).max(1)
        assert np.all(bound >= true - 1e-5)

    def test_quest_sums_group(self):
        sh = ModelShape(num_kv_heads=1, group_size=2, head_dim=2, block_size=2)
        kmin = np.array([[[0.0, -1.0]]], np.float32)
        kmax = np.array([[[1.0, 2.0]]], np.float32)
        q = np.array([[1.0, 1.0], [-1.0, 1.0]], np.float32)
        # head 0: max(0,1)+max(-1,2)=3; head 1: max(0,-1)+max(-1,2)=2
        assert quest_scores(q, kmin, kmax, sh)[0, 0] == pytest.approx(5.0)

    @given(st.integers(1, 40), st.integers(0, 50))
    @settings(max_examples=40, deadline=None)
    def test_newest_always_present(self, n, seed):
        rng = np.random.default_rng(seed)
        nbf = n // 4
        newest = (n - 1) // 4
        for pol, s in [
            (SparsifyPolicy("budget", 4, budget=8), rng.standard_normal((2, nbf))),
            (SparsifyPolicy("threshold", 4, threshold=0.3), rng.dirichlet(np.ones(max(nbf, 1)), 2)[:, :nbf]),
            (SparsifyPolicy("oracle", 4, budget=8), rng.dirichlet(np.ones(newest + 1), 2)),
            (SparsifyPolicy("quest", 4, budget=4), rng.standard_normal((2, nbf))),
            (SparsifyPolicy("dense", 4), None),
        ]:
            for ix in select_blocks(pol, s, n):
                assert newest in ix and np.all(np.diff(ix) > 0)


class TestSparseDecode:
    def test_full_selection_equals_dense(self):
        q, k, v = rand_kv(SH, 23, 0)
        out = sparse_decode(q, k, v, all_blocks(SH, 23), SH, num_split=1)
        np.testing.assert_allclose(out, dense_row(q, k, v, SH), atol=1e-5)

    @given(st.integers(1, 60), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_split_invariance(self, n, seed):
        q, k, v = rand_kv(SH, n, seed)
        rng = np.random.default_rng(seed)
        nb = SH.num_blocks(n)
        heads = [np.union1d(rng.permutation(nb)[: rng.integers(1, nb + 1)], [nb - 1]) for _ in range(2)]
        sel = BlockSelection([heads], [n], 4)
        outs = [sparse_decode(q, k, v, sel, SH, num_split=s) for s in (1, 2, 4, 8)]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], atol=1e-4)

    def test_restricted_to_selected_blocks(self):
        q, k, v = rand_kv(SH, 16, 3)
        sel = BlockSelection([[np.array([1, 3]), np.array([0, 3])]], [16], 4)
        out = sparse_decode(q, k, v, sel, SH)
        for h, blocks in enumerate([[1, 3], [0, 3]]):
            toks = np.concatenate([np.arange(j * 4, j * 4 + 4) for j in blocks])
            s = q[2 * h : 2 * h + 2, 0] @ k[h, toks].T / np.sqrt(8)
            p = np.exp(s - s.max(1, keepdims=True))
            ref = (p / p.sum(1, keepdims=True)) @ v[h, toks]
            np.testing.assert_allclose(out[2 * h : 2 * h + 2, 0], ref, atol=1e-5)

    def test_batch_with_ragged_selection(self):
        q1, k1, v1 = rand_kv(SH, 20, 1)
        q2, k2, v2 = rand_kv(SH, 13, 2)
        k2p = np.concatenate([k2, np.zeros((2, 7, 8), np.float32)], 1)
        v2p = np.concatenate([v2, np.zeros((2, 7, 8), np.float32)], 1)
        sel = BlockSelection(
            [[np.arange(5), np.arange(5)], [np.array([3]), np.array([0, 3])]], [20, 13], 4
        )
        out = sparse_decode(np.stack([q1, q2]), np.stack([k1, k2p]), np.stack([v1, v2p]), sel, SH, num_split=4)
        np.testing.assert_allclose(out[0], dense_row(q1, k1, v1, SH), atol=1e-5)
        single = sparse_decode(q2, k2, v2, BlockSelection([sel.indices[1]], [13], 4), SH)
        np.testing.assert_allclose(out[1], single, atol=1e-6)
        assert sel.padded().tolist()[1] == [[3, -1, -1, -1, -1], [0, 3, -1, -1, -1]]

    def test_out_of_range_block(self):
        q, k, v = rand_kv(SH, 8, 0)
        with pytest.raises(ShapeError):
            sparse_decode(q, k, v, BlockSelection([[np.array([2]), np.array([1])]], [8], 4), SH)

    def test_high_coverage_oracle_small_error(self):
        sh = ModelShape(num_kv_heads=2, group_size=2, head_dim=16, block_size=8)
        inp = synth_qk("clustered", sh, 256, 0)
        t = 255
        row = AttentionInputs(inp.q[:, t : t + 1], inp.k, inp.v, causal_offset=t)
        gt = ground_truth_naive(row, sh).gt[:, 0]
        heads = []
        for h in range(2):
            order = np.argsort(-gt[h], kind="stable")
            n = int(np.searchsorted(np.cumsum(gt[h][order]), 0.99)) + 1
            heads.append(np.union1d(order[:n], [31]))
        out = sparse_decode(row.q, inp.k, inp.v, BlockSelection([heads], [256], 8), sh)
        ref = dense_attention(row, sh)
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-2


class TestSession:
    def test_full_budget_matches_dense(self):
        sh = ModelShape(num_kv_heads=2, group_size=2, head_dim=8, block_size=4)
        inp = synth_qk("clustered", sh, 60, 1)
        ref = dense_attention(inp, sh)
        p = init_gate_params(sh, 0)
        sess = DecodeSession(sh, p, SparsifyPolicy("budget", 4, budget=10_000), capacity=4)
        sess.prefill(AttentionInputs(inp.q[:, :10], inp.k[:, :10], inp.v[:, :10], q_nope=inp.q_nope[:, :10], k_nope=inp.k_nope[:, :10]))
        for t in range(10, 60):
            res = sess.step_from(inp, t)
            np.testing.assert_allclose(res.output, ref[:, t], atol=1e-4)
        # the incremental compression cache matches a from-scratch recompute
        np.testing.assert_array_equal(sess.cache.compressed, gate_forward_k(inp.k_nope, p, sh))

    @pytest.mark.parametrize("mode", ["budget", "threshold", "oracle", "quest", "dense"])
    def test_every_policy_runs_and_forces_newest(self, mode):
        sh = ModelShape(num_kv_heads=2, group_size=2, head_dim=8, block_size=4)
        inp = synth_qk("clustered", sh, 40, 2)
        pol = SparsifyPolicy(mode, 4, budget=None if mode in ("threshold", "dense") else 8,
                             threshold=0.2 if mode == "threshold" else None)
        sess = DecodeSession(sh, init_gate_params(sh, 0), pol)
        for t in range(40):
            res = sess.step_from(inp, t)
            for ix in res.selection.indices[0]:
                assert t // 4 in ix
            res.selection.validate()

    def test_out_of_order_row(self):
        sh = ModelShape(num_kv_heads=2, group_size=2, head_dim=8, block_size=4)
        sess = DecodeSession(sh, None, SparsifyPolicy("dense", 4))
        with pytest.raises(ValueError):
            sess.step_from(synth_qk("uniform", sh, 5, 0), 2)


def test_budget_monotone_error():
    """Oracle output error does not grow with the token budget on these clustered inputs."""
    sh = ModelShape(num_kv_heads=2, group_size=2, head_dim=16, block_size=8)
    for seed in range(10):
        inp = synth_qk("clustered", sh, 128, seed)
        t = 127
        row = AttentionInputs(inp.q[:, t : t + 1], inp.k, inp.v, causal_offset=t)
        gt = ground_truth_naive(row, sh).gt[:, 0]
        ref = dense_attention(row, sh)
        errs = []
        for budget in (8, 16, 32, 64, 128):
            heads = select_blocks(SparsifyPolicy("oracle", 8, budget=budget), gt, 128)
            out = sparse_decode(row.q, inp.k, inp.v, BlockSelection([heads], [128], 8), sh)
            errs.append(np.linalg.norm(out - ref) / np.linalg.norm(ref))
        assert all(b <= a + 1e-7 for a, b in zip(errs, errs[1:])), errs
