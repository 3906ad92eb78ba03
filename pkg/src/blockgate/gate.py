"""The block-selection gate: forward passes, scoring, KL loss and gradients.

Per kv-head group the gate maps the group's concatenated pre-RoPE queries to
one gate query, maps each key block's [max; min; avg] pooled summary to one
gate key, re-applies RoPE (block keys sit at their first token's position),
and scores blocks with a causal scaled dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionInputs, GroundTruthMap
from .errors import ShapeError
from .tensor import (
    ModelShape,
    as_tensor,
    block_pool,
    block_pool_backward,
    matmul,
    rope_apply,
    softmax_row,
)

ScoreMode = Literal["softmax", "logits"]
SCORE_FLOOR = 1e-9


@dataclass
class GateParams:
    """``w_q``: [num_kv_heads, gate_dim, group_size*head_dim];
    ``w_k``: [num_kv_heads, gate_dim, 3*head_dim]."""

    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self) -> None:
        self.w_q = as_tensor(self.w_q)
        self.w_k = as_tensor(self.w_k)

    def check(self, shape: ModelShape) -> None:
        hk, dg, g, d = shape.num_kv_heads, shape.gate_dim, shape.group_size, shape.head_dim
        if self.w_q.shape != (hk, dg, g * d):
            raise ShapeError(f"w_q must be {(hk, dg, g * d)}, got {self.w_q.shape}")
        if self.w_k.shape != (hk, dg, 3 * d):
            raise ShapeError(f"w_k must be {(hk, dg, 3 * d)}, got {self.w_k.shape}")

    def copy(self) -> "GateParams":
        return GateParams(self.w_q.copy(), self.w_k.copy())

    def arrays(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k}

    @classmethod
    def zeros(cls, shape: ModelShape) -> "GateParams":
        hk, dg, g, d = shape.num_kv_heads, shape.gate_dim, shape.group_size, shape.head_dim
        return cls(np.zeros((hk, dg, g * d), np.float32), np.zeros((hk, dg, 3 * d), np.float32))


def init_gate_params(shape: ModelShape, seed: int = 0) -> GateParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both projections."""
    rng = np.random.default_rng(seed)
    hk, dg, g, d = shape.num_kv_heads, shape.gate_dim, shape.group_size, shape.head_dim
    bq = 1.0 / math.sqrt(g * d)
    bk = 1.0 / math.sqrt(3 * d)
    return GateParams(
        rng.uniform(-bq, bq, size=(hk, dg, g * d)).astype(np.float32),
        rng.uniform(-bk, bk, size=(hk, dg, 3 * d)).astype(np.float32),
    )


@dataclass
class GateScores:
    """``s``: [num_kv_heads, q_len, num_blocks]; ``valid``: [q_len, num_blocks].

    In logits mode masked entries are -inf; in softmax mode they are 0.
    """

    s: np.ndarray
    valid: np.ndarray
    mode: ScoreMode = "softmax"


@dataclass
class GateGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    q_nope: Optional[np.ndarray] = None
    k_nope: Optional[np.ndarray] = None


def group_queries(q_nope: np.ndarray, shape: ModelShape) -> np.ndarray:
    """[num_q_heads, q_len, d] -> [num_kv_heads, q_len, g*d], heads concatenated in order."""
    q_nope = as_tensor(q_nope)
    hq, q_len, d = q_nope.shape
    if hq != shape.num_q_heads or d != shape.head_dim:
        raise ShapeError(f"q must be [{shape.num_q_heads}, q_len, {shape.head_dim}], got {q_nope.shape}")
    g = shape.group_size
    x = q_nope.reshape(shape.num_kv_heads, g, q_len, d).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(x.reshape(shape.num_kv_heads, q_len, g * d))


def pooled_keys(k_head: np.ndarray, block_size: int) -> np.ndarray:
    """[kv_len, d] -> [num_blocks, 3d] as concat(max, min, avg)."""
    return np.concatenate(
        [block_pool(k_head, block_size, kind) for kind in ("max", "min", "avg")], axis=1
    )


def block_positions(num_blocks: int, block_size: int, first_block: int = 0) -> np.ndarray:
    return (first_block + np.arange(num_blocks)) * block_size


def _maybe_rope(x: np.ndarray, positions, shape: ModelShape, inverse: bool = False) -> np.ndarray:
    if not shape.gate_rope:
        return x
    return rope_apply(x, positions, shape.rope_theta, inverse=inverse)


def gate_forward_q(q_nope, params: GateParams, shape: ModelShape, positions: Sequence[int]) -> np.ndarray:
    params.check(shape)
    grouped = group_queries(q_nope, shape)
    if len(positions) != grouped.shape[1]:
        raise ShapeError(f"{len(positions)} positions for {grouped.shape[1]} query rows")
    return np.stack(
        [_maybe_rope(matmul(grouped[h], params.w_q[h].T), positions, shape) for h in range(shape.num_kv_heads)]
    )


def gate_forward_k(k_nope, params: GateParams, shape: ModelShape, first_block: int = 0) -> np.ndarray:
    """Compressed gate keys, [num_kv_heads, num_blocks, gate_dim].

    ``first_block`` offsets block positions when ``k_nope`` starts mid-sequence
    at a block boundary (incremental cache updates).
    """
    params.check(shape)
    k_nope = as_tensor(k_nope)
    if k_nope.ndim != 3 or k_nope.shape[0] != shape.num_kv_heads or k_nope.shape[2] != shape.head_dim:
        raise ShapeError(f"k must be [{shape.num_kv_heads}, kv_len, {shape.head_dim}], got {k_nope.shape}")
    if k_nope.shape[1] < 1:
        raise ShapeError("gate_forward_k needs at least one key row")
    b = shape.block_size
    out = []
    for h in range(shape.num_kv_heads):
        pooled = pooled_keys(k_nope[h], b)
        pos = block_positions(pooled.shape[0], b, first_block)
        out.append(_maybe_rope(matmul(pooled, params.w_k[h].T), pos, shape))
    return np.stack(out)


def block_validity(positions: Sequence[int], num_blocks: int, block_size: int) -> np.ndarray:
    """Block j is visible to a query at position p iff j*b <= p."""
    pos = np.asarray(positions).reshape(-1, 1)
    return (np.arange(num_blocks) * block_size)[None, :] <= pos


def gate_score(
    qg: np.ndarray,
    kg: np.ndarray,
    shape: ModelShape,
    positions: Sequence[int],
    mode: ScoreMode = "softmax",
) -> GateScores:
    hk, q_len, dg = qg.shape
    if kg.shape[0] != hk or kg.shape[2] != dg:
        raise ShapeError(f"gate query {qg.shape} and key {kg.shape} disagree")
    valid = block_validity(positions, kg.shape[1], shape.block_size)
    scale = np.float32(1.0 / math.sqrt(dg))
    s = np.empty((hk, q_len, kg.shape[1]), dtype=np.float32)
    for h in range(hk):
        logits = matmul(qg[h], kg[h].T) * scale
        if mode == "softmax":
            s[h] = softmax_row(logits, valid)
        elif mode == "logits":
            s[h] = np.where(valid, logits, -np.inf)
        else:
            raise ValueError(f"unknown score mode {mode!r}")
    return GateScores(s=s, valid=valid, mode=mode)


def gate_forward(inp: AttentionInputs, params: GateParams, shape: ModelShape, mode: ScoreMode = "softmax") -> GateScores:
    qg = gate_forward_q(inp.gate_q, params, shape, inp.positions)
    kg = gate_forward_k(inp.gate_k, params, shape)
    return gate_score(qg, kg, shape, inp.positions, mode)


def kl_loss(scores: GateScores, gt: GroundTruthMap) -> float:
    """Mean over (kv-head, query row) of KL(gt || scores), scores floored at 1e-9."""
    if scores.mode != "softmax":
        raise ValueError("kl_loss needs softmax-mode scores")
    s, t = scores.s, gt.gt
    if s.shape != t.shape:
        raise ShapeError(f"scores {s.shape} and ground truth {t.shape} differ")
    t64 = t.astype(np.float64)
    s64 = np.maximum(s.astype(np.float64), SCORE_FLOOR)
    pos = t64 > 0
    terms = np.zeros_like(t64)
    terms[pos] = t64[pos] * (np.log(t64[pos]) - np.log(s64[pos]))
    rows = s.shape[0] * s.shape[1]
    return float(terms.sum(axis=-1).sum() / rows)


def gate_backward(
    inp: AttentionInputs,
    params: GateParams,
    shape: ModelShape,
    gt: GroundTruthMap,
    input_grads: bool = False,
) -> Tuple[float, GateGrads]:
    """Loss and exact gradients of ``kl_loss`` with respect to the gate weights.

    With ``input_grads`` the gradients for the pre-RoPE queries and keys are
    returned too (max/min pooling routes to the first extremal row).
    """
    params.check(shape)
    b = shape.block_size
    positions = inp.positions
    grouped = group_queries(inp.gate_q, shape)
    k_nope = inp.gate_k
    hk, q_len = shape.num_kv_heads, inp.q_len
    nb = shape.num_blocks(inp.kv_len)
    kpos = block_positions(nb, b)
    scale = np.float32(1.0 / math.sqrt(shape.gate_dim))
    n_rows = np.float32(hk * q_len)

    pooled, qg, kg = [], [], []
    for h in range(hk):
        pooled.append(pooled_keys(k_nope[h], b))
        qg.append(_maybe_rope(matmul(grouped[h], params.w_q[h].T), positions, shape))
        kg.append(_maybe_rope(matmul(pooled[h], params.w_k[h].T), kpos, shape))
    scores = gate_score(np.stack(qg), np.stack(kg), shape, positions, "softmax")
    loss = kl_loss(scores, gt)

    grads = GateGrads(np.zeros_like(params.w_q), np.zeros_like(params.w_k))
    if input_grads:
        grads.q_nope = np.zeros((shape.num_q_heads, q_len, shape.head_dim), np.float32)
        grads.k_nope = np.zeros_like(as_tensor(k_nope))
    for h in range(hk):
        s = scores.s[h]
        t = gt.gt[h]
        live = (t > 0) & (s >= SCORE_FLOOR)
        d_s = np.where(live, -t / np.where(live, s, 1.0), 0.0).astype(np.float32) / n_rows
        d_z = s * (d_s - (s * d_s).sum(axis=-1, keepdims=True, dtype=np.float32))
        d_z *= scale
        d_a = _maybe_rope(matmul(d_z, kg[h]), positions, shape, inverse=True)
        d_b = _maybe_rope(matmul(d_z.T, qg[h]), kpos, shape, inverse=True)
        grads.w_q[h] = matmul(d_a.T, grouped[h])
        grads.w_k[h] = matmul(d_b.T, pooled[h])
        if input_grads:
            d_x = matmul(d_a, params.w_q[h])
            g, d = shape.group_size, shape.head_dim
            grads.q_nope[h * g : (h + 1) * g] = d_x.reshape(q_len, g, d).transpose(1, 0, 2)
            d_p = matmul(d_b, params.w_k[h])
            for i, kind in enumerate(("max", "min", "avg")):
                grads.k_nope[h] += block_pool_backward(d_p[:, i * d : (i + 1) * d], k_nope[h], b, kind)
    return loss, grads
