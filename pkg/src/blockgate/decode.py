"""Sparse decoding: compression cache, block selection and split-scheduled decode."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np

from .attention import AttentionInputs, ground_truth_naive
from .errors import ShapeError
from .gate import GateParams, gate_forward_k, gate_forward_q, gate_score
from .tensor import ModelShape, as_tensor, block_pool, matmul, topk_indices

PolicyMode = Literal["budget", "threshold", "oracle", "quest", "dense"]


class KCompressionCache:
    """Per kv-head compressed gate keys, finalized one full block at a time.

    Rows wait in ``raw_tail`` until ``block_size`` of them have arrived; the
    block is then pooled, projected and rotated to its first token's position.
    """

    def __init__(self, shape: ModelShape, params: GateParams, capacity_blocks: int = 16):
        params.check(shape)
        self.shape = shape
        self.params = params
        self._blocks = np.zeros((shape.num_kv_heads, capacity_blocks, shape.gate_dim), np.float32)
        self.num_blocks = 0
        self.raw_tail = np.zeros((shape.num_kv_heads, 0, shape.head_dim), np.float32)

    @property
    def compressed(self) -> np.ndarray:
        """[num_kv_heads, num_finalized_blocks, gate_dim] view."""
        return self._blocks[:, : self.num_blocks]

    @property
    def finalized_len(self) -> int:
        return self.num_blocks * self.shape.block_size

    @property
    def seq_len(self) -> int:
        return self.finalized_len + self.raw_tail.shape[1]

    def _push(self, vec: np.ndarray) -> None:
        if self.num_blocks == self._blocks.shape[1]:
            grown = np.zeros((self._blocks.shape[0], 2 * self._blocks.shape[1], self._blocks.shape[2]), np.float32)
            grown[:, : self.num_blocks] = self._blocks[:, : self.num_blocks]
            self._blocks = grown
        self._blocks[:, self.num_blocks] = vec
        self.num_blocks += 1

    def append(self, k_rows) -> "KCompressionCache":
        """Append pre-RoPE key rows ``[num_kv_heads, n, head_dim]`` in sequence order."""
        k_rows = as_tensor(k_rows)
        if k_rows.ndim != 3 or k_rows.shape[0] != self.shape.num_kv_heads or k_rows.shape[2] != self.shape.head_dim:
            raise ShapeError(f"key rows must be [{self.shape.num_kv_heads}, n, {self.shape.head_dim}], got {k_rows.shape}")
        b = self.shape.block_size
        pending = np.concatenate([self.raw_tail, k_rows], axis=1)
        start = 0
        while pending.shape[1] - start >= b:
            block = pending[:, start : start + b]
            self._push(gate_forward_k(block, self.params, self.shape, first_block=self.num_blocks)[:, 0])
            start += b
        self.raw_tail = np.ascontiguousarray(pending[:, start:])
        return self

    @staticmethod
    def memory_ratio(shape: ModelShape) -> float:
        """Compression-cache bytes over KV-cache bytes."""
        return shape.gate_dim / (shape.block_size * 2 * shape.head_dim)


def cache_append(cache: KCompressionCache, new_k_rows, params: GateParams, shape: ModelShape) -> KCompressionCache:
    if cache.params is not params or cache.shape != shape:
        raise ValueError("cache was built for different gate parameters or shape")
    return cache.append(new_k_rows)


@dataclass
class BlockSelection:
    """``indices[batch][kv_head]``: strictly increasing activated block ids."""

    indices: List[List[np.ndarray]]
    seq_lens: List[int]
    block_size: int

    @property
    def max_selected_blocks(self) -> int:
        return max((len(ix) for row in self.indices for ix in row), default=0)

    def validate(self) -> None:
        for row, n in zip(self.indices, self.seq_lens):
            nb = -(-n // self.block_size)
            newest = (n - 1) // self.block_size
            for ix in row:
                if ix.size and (np.any(np.diff(ix) <= 0) or ix[0] < 0):
                    raise ShapeError(f"selection not strictly increasing: {ix}")
                if ix.size and ix[-1] >= nb:
                    raise ShapeError(f"selection references block {ix[-1]} but only {nb} exist")
                if newest not in ix:
                    raise ShapeError("newest block missing from selection")

    def activated_tokens(self, batch: int = 0) -> List[int]:
        n = self.seq_lens[batch]
        b = self.block_size
        return [int(sum(min(b, n - j * b) for j in ix)) for ix in self.indices[batch]]

    def padded(self, fill: int = -1) -> np.ndarray:
        """Dense [batch, heads_kv, max_selected_blocks] index tensor, ``fill`` marking skipped slots."""
        width = self.max_selected_blocks
        out = np.full((len(self.indices), len(self.indices[0]), width), fill, np.int64)
        for bi, row in enumerate(self.indices):
            for h, ix in enumerate(row):
                out[bi, h, : ix.size] = ix
        return out


@dataclass
class SparsifyPolicy:
    mode: PolicyMode
    block_size: int
    budget: Optional[int] = None
    threshold: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode in ("budget", "oracle", "quest"):
            if self.budget is None or self.budget < self.block_size:
                raise ValueError(f"token budget must be >= block size {self.block_size}, got {self.budget}")
        elif self.mode == "threshold":
            if self.threshold is None or not 0 < self.threshold <= 1:
                raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        elif self.mode != "dense":
            raise ValueError(f"unknown policy mode {self.mode!r}")

    @property
    def block_budget(self) -> int:
        return self.budget // self.block_size


def newest_block(seq_len: int, block_size: int) -> int:
    return (seq_len - 1) // block_size


def _with_newest(chosen: np.ndarray, newest: int) -> np.ndarray:
    return np.union1d(np.asarray(chosen, np.int64), np.array([newest], np.int64))


def _top_blocks(scores: np.ndarray, k_blocks: int, newest: int) -> np.ndarray:
    """Top ``k_blocks - 1`` scored blocks other than ``newest``, plus ``newest``."""
    cand = np.asarray(scores, np.float64).copy()
    if newest < cand.size:
        cand[newest] = -np.inf
    n_cand = cand.size - (1 if newest < cand.size else 0)
    picked = topk_indices(cand, min(max(k_blocks - 1, 0), n_cand))
    return _with_newest(picked, newest)


def select_blocks(policy: SparsifyPolicy, scores: Optional[np.ndarray], seq_len: int) -> List[np.ndarray]:
    """Per kv-head block indices for one sequence.

    ``scores`` is [num_kv_heads, n]: gate logits or probabilities over
    finalized blocks (budget/threshold), the ground-truth row over all blocks
    (oracle), or group-reduced Quest bounds (quest). Ignored for dense.
    The newest block is always included and counts against the budget.
    """
    b = policy.block_size
    if seq_len < 1:
        raise ShapeError("seq_len must be >= 1")
    newest = newest_block(seq_len, b)
    nb = newest + 1
    if policy.mode == "dense":
        heads = 1 if scores is None else scores.shape[0]
        return [np.arange(nb, dtype=np.int64) for _ in range(heads)]
    scores = np.asarray(scores)
    if scores.shape[1] > nb:
        raise ShapeError(f"{scores.shape[1]} scored blocks for a {seq_len}-token sequence")
    out = []
    for row in scores:
        if policy.mode == "threshold":
            out.append(_with_newest(np.flatnonzero(row >= policy.threshold), newest))
        else:
            out.append(_top_blocks(row, policy.block_budget, newest))
    return out


def quest_metadata(k: np.ndarray, block_size: int, num_blocks: Optional[int] = None):
    """Elementwise per-block (min, max) of post-RoPE keys, each [num_kv_heads, nb, d]."""
    k = as_tensor(k)
    if num_blocks is not None:
        k = k[:, : num_blocks * block_size]
    if k.shape[1] == 0:
        empty = np.zeros((k.shape[0], 0, k.shape[2]), np.float32)
        return empty, empty
    kmin = np.stack([block_pool(k[h], block_size, "min") for h in range(k.shape[0])])
    kmax = np.stack([block_pool(k[h], block_size, "max") for h in range(k.shape[0])])
    return kmin, kmax


def quest_scores(q_row: np.ndarray, kmin: np.ndarray, kmax: np.ndarray, shape: ModelShape) -> np.ndarray:
    """Per-block attention upper bounds, summed over each group's q-heads.

    q_row: [num_q_heads, d] post-RoPE. Returns [num_kv_heads, nb].
    """
    q_row = as_tensor(q_row).reshape(shape.num_q_heads, shape.head_dim)
    out = np.zeros((shape.num_kv_heads, kmin.shape[1]), np.float32)
    for h in range(shape.num_q_heads):
        kv = shape.kv_head_of(h)
        qi = q_row[h][None, None, :]
        bound = np.maximum(qi * kmin[kv], qi * kmax[kv])[0]
        out[kv] += bound.sum(axis=-1, dtype=np.float32)
    return out


def default_num_split(max_selected_blocks: int) -> int:
    return max(1, -(-max_selected_blocks // 8))


def _split_partial(q_grp, k_head, v_head, blocks, seq_len, b, scale):
    toks = np.concatenate([np.arange(j * b, min((j + 1) * b, seq_len)) for j in blocks])
    s = matmul(q_grp, k_head[toks].T) * scale
    m = s.max(axis=1, keepdims=True)
    p = np.exp(s - m)
    l = p.sum(axis=1, keepdims=True, dtype=np.float32)
    return matmul(p, v_head[toks]) / l, m, l


def sparse_decode(
    q,
    k,
    v,
    selection: BlockSelection,
    shape: ModelShape,
    num_split: Optional[int] = None,
) -> np.ndarray:
    """Attention of one new query row per sequence over its selected blocks only.

    ``q``: [num_q_heads, 1, d] or [batch, num_q_heads, 1, d] (post-RoPE);
    ``k``/``v``: [num_kv_heads, S, d] or [batch, num_kv_heads, S, d], where
    sequence ``i`` occupies the first ``selection.seq_lens[i]`` rows.

    Work is laid out on a (batch, kv-head, split) grid. Each cell's sorted
    selection is cut into ``num_split`` contiguous chunks of
    ceil(max_selected_blocks / num_split) blocks; empty chunks are skipped and
    the partial results are merged by log-sum-exp in split order.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    single = q.ndim == 3
    if single:
        q, k, v = q[None], k[None], v[None]
    batch = q.shape[0]
    if q.shape[1:] != (shape.num_q_heads, 1, shape.head_dim):
        raise ShapeError(f"q must be [..., {shape.num_q_heads}, 1, {shape.head_dim}], got {q.shape}")
    if k.shape[:2] != (batch, shape.num_kv_heads) or k.shape != v.shape:
        raise ShapeError(f"k/v must be [..., {shape.num_kv_heads}, S, {shape.head_dim}], got {k.shape}, {v.shape}")
    if len(selection.indices) != batch:
        raise ShapeError(f"selection covers {len(selection.indices)} sequences, q has {batch}")
    b = shape.block_size
    for bi, n in enumerate(selection.seq_lens):
        nb = -(-n // b)
        if n > k.shape[2]:
            raise ShapeError(f"sequence {bi} has {n} tokens but the cache holds {k.shape[2]}")
        for ix in selection.indices[bi]:
            if ix.size and (ix[-1] >= nb or ix[0] < 0):
                raise ShapeError(f"selection references a block outside 0..{nb - 1}")
    max_sel = selection.max_selected_blocks
    num_split = num_split or default_num_split(max_sel)
    chunk = max(1, -(-max_sel // num_split))
    g = shape.group_size
    scale = np.float32(1.0 / math.sqrt(shape.head_dim))
    out = np.empty_like(q)
    for bi in range(batch):
        n = selection.seq_lens[bi]
        for h in range(shape.num_kv_heads):
            ix = selection.indices[bi][h]
            q_grp = q[bi, h * g : (h + 1) * g, 0]
            parts = []
            for s in range(num_split):
                blocks = ix[s * chunk : (s + 1) * chunk]
                if blocks.size == 0:
                    continue
                parts.append(_split_partial(q_grp, k[bi, h], v[bi, h], blocks, n, b, scale))
            if not parts:
                raise ShapeError("empty selection")
            m_all = parts[0][1]
            for _, m, _ in parts[1:]:
                m_all = np.maximum(m_all, m)
            acc = np.zeros((g, shape.head_dim), np.float32)
            den = np.zeros((g, 1), np.float32)
            for o, m, l in parts:
                w = l * np.exp(m - m_all)
                acc += o * w
                den += w
            out[bi, h * g : (h + 1) * g, 0] = acc / den
    return out[0] if single else out


@dataclass
class StepResult:
    output: np.ndarray
    selection: BlockSelection
    position: int
    gate_scores: Optional[np.ndarray] = None


class DecodeSession:
    """Single-sequence auto-regressive state: KV cache plus compression cache."""

    def __init__(
        self,
        shape: ModelShape,
        params: Optional[GateParams],
        policy: SparsifyPolicy,
        num_split: Optional[int] = None,
        capacity: int = 1024,
    ):
        self.shape = shape
        self.params = params
        self.policy = policy
        self.num_split = num_split
        hk, d = shape.num_kv_heads, shape.head_dim
        self._k = np.zeros((hk, capacity, d), np.float32)
        self._v = np.zeros((hk, capacity, d), np.float32)
        self.seq_len = 0
        self.cache = KCompressionCache(shape, params) if params is not None else None

    @property
    def k(self) -> np.ndarray:
        return self._k[:, : self.seq_len]

    @property
    def v(self) -> np.ndarray:
        return self._v[:, : self.seq_len]

    def _store(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        n = k_rows.shape[1]
        if self.seq_len + n > self._k.shape[1]:
            cap = max(2 * self._k.shape[1], self.seq_len + n)
            for name in ("_k", "_v"):
                old = getattr(self, name)
                new = np.zeros((old.shape[0], cap, old.shape[2]), np.float32)
                new[:, : self.seq_len] = old[:, : self.seq_len]
                setattr(self, name, new)
        self._k[:, self.seq_len : self.seq_len + n] = k_rows
        self._v[:, self.seq_len : self.seq_len + n] = v_rows
        self.seq_len += n

    def prefill(self, inp: AttentionInputs) -> None:
        """Fill caches with a prefix; the prefix's own outputs are not needed here."""
        inp.validate(self.shape)
        if self.seq_len:
            raise ValueError("prefill on a non-empty session")
        self._store(inp.k, inp.v)
        if self.cache is not None:
            self.cache.append(inp.gate_k)

    def _scores(self, policy: SparsifyPolicy, q_row, q_nope_row, pos):
        if policy.mode == "dense":
            return None
        if policy.mode == "oracle":
            inp = AttentionInputs(q=q_row[:, None], k=self.k, v=self.v, causal_offset=pos)
            return ground_truth_naive(inp, self.shape).gt[:, 0]
        if policy.mode == "quest":
            kmin, kmax = quest_metadata(self.k, self.shape.block_size, self.seq_len // self.shape.block_size)
            return quest_scores(q_row, kmin, kmax, self.shape)
        if self.cache is None:
            raise ValueError(f"policy {policy.mode!r} needs gate parameters")
        kg = self.cache.compressed
        if kg.shape[1] == 0:
            return np.zeros((self.shape.num_kv_heads, 0), np.float32)
        qg = gate_forward_q(q_nope_row[:, None], self.params, self.shape, [pos])
        mode = "softmax" if policy.mode == "threshold" else "logits"
        return gate_score(qg, kg, self.shape, [pos], mode).s[:, 0]

    def step(self, q_row, k_row, v_row, q_nope_row=None, k_nope_row=None, policy: Optional[SparsifyPolicy] = None) -> StepResult:
        """One token: rows are [heads, d]; ``*_nope`` default to the rotated rows."""
        policy = policy or self.policy
        q_row, k_row, v_row = as_tensor(q_row), as_tensor(k_row), as_tensor(v_row)
        q_nope_row = q_row if q_nope_row is None else as_tensor(q_nope_row)
        k_nope_row = k_row if k_nope_row is None else as_tensor(k_nope_row)
        pos = self.seq_len
        self._store(k_row[:, None], v_row[:, None])
        if self.cache is not None:
            self.cache.append(k_nope_row[:, None])
        scores = self._scores(policy, q_row, q_nope_row, pos)
        heads = select_blocks(policy, scores, self.seq_len)
        if len(heads) != self.shape.num_kv_heads:
            heads = [heads[0]] * self.shape.num_kv_heads
        selection = BlockSelection([heads], [self.seq_len], self.shape.block_size)
        out = sparse_decode(q_row[:, None], self.k, self.v, selection, self.shape, self.num_split)
        return StepResult(out[:, 0], selection, pos, scores)

    def step_from(self, inp: AttentionInputs, t: int, policy: Optional[SparsifyPolicy] = None) -> StepResult:
        """Feed row ``t`` of a full sequence (must equal the current length)."""
        if t != self.seq_len:
            raise ValueError(f"expected row {self.seq_len}, got {t}")
        return self.step(
            inp.q[:, t],
            inp.k[:, t],
            inp.v[:, t],
            inp.gate_q[:, t],
            inp.gate_k[:, t],
            policy,
        )


def decode_session_step(session: DecodeSession, q_row, k_row, v_row, policy: SparsifyPolicy, q_nope_row=None, k_nope_row=None) -> StepResult:
    return session.step(q_row, k_row, v_row, q_nope_row, k_nope_row, policy)
