"""Reference GQA attention and distillation-target generation.

Three paths compute the same attention output: a dense one that materializes
the probability map, a streaming one using online softmax over key blocks,
and a fused streaming one that also records per-block maxima to build the
ground-truth map without ever holding the full map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import (
    ModelShape,
    as_tensor,
    block_pool,
    causal_mask,
    matmul,
    softmax_row,
)


@dataclass
class AttentionInputs:
    """Per-sequence attention operands.

    ``q``/``k`` are what the model attends with (post-RoPE). ``q_nope`` and
    ``k_nope`` are the pre-RoPE tensors consumed by the gate; when absent the
    gate reads ``q``/``k`` directly. Query row i sits at absolute position
    ``causal_offset + i`` and sees keys ``0..position``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    causal_offset: int = 0
    q_nope: Optional[np.ndarray] = None
    k_nope: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.q = as_tensor(self.q)
        self.k = as_tensor(self.k)
        self.v = as_tensor(self.v)
        if self.q_nope is not None:
            self.q_nope = as_tensor(self.q_nope)
        if self.k_nope is not None:
            self.k_nope = as_tensor(self.k_nope)

    @property
    def q_len(self) -> int:
        return self.q.shape[1]

    @property
    def kv_len(self) -> int:
        return self.k.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.causal_offset + np.arange(self.q_len)

    @property
    def gate_q(self) -> np.ndarray:
        return self.q if self.q_nope is None else self.q_nope

    @property
    def gate_k(self) -> np.ndarray:
        return self.k if self.k_nope is None else self.k_nope

    def validate(self, shape: ModelShape) -> None:
        hq, hk, d = shape.num_q_heads, shape.num_kv_heads, shape.head_dim
        if self.q.ndim != 3 or self.q.shape[0] != hq or self.q.shape[2] != d:
            raise ShapeError(f"q must be [{hq}, q_len, {d}], got {self.q.shape}")
        for name in ("k", "v"):
            t = getattr(self, name)
            if t.ndim != 3 or t.shape[0] != hk or t.shape[2] != d:
                raise ShapeError(f"{name} must be [{hk}, kv_len, {d}], got {t.shape}")
        if self.k.shape != self.v.shape:
            raise ShapeError(f"k {self.k.shape} and v {self.v.shape} differ")
        if self.q_len < 1 or self.kv_len < 1:
            raise ShapeError("q_len and kv_len must be at least 1")
        if self.causal_offset < 0:
            raise ShapeError(f"causal_offset must be >= 0, got {self.causal_offset}")
        if self.q_nope is not None and self.q_nope.shape != self.q.shape:
            raise ShapeError(f"q_nope {self.q_nope.shape} does not match q {self.q.shape}")
        if self.k_nope is not None and self.k_nope.shape != self.k.shape:
            raise ShapeError(f"k_nope {self.k_nope.shape} does not match k {self.k.shape}")

    def slice_queries(self, start: int, stop: int) -> "AttentionInputs":
        return AttentionInputs(
            q=self.q[:, start:stop],
            k=self.k,
            v=self.v,
            causal_offset=self.causal_offset + start,
            q_nope=None if self.q_nope is None else self.q_nope[:, start:stop],
            k_nope=self.k_nope,
        )


@dataclass
class GroundTruthMap:
    """Row-normalized, group-maxed block maxima of the attention map.

    ``gt`` has shape [num_kv_heads, q_len, num_blocks].
    """

    gt: np.ndarray
    block_size: int

    @property
    def num_blocks(self) -> int:
        return self.gt.shape[-1]


def _inv_sqrt(d: int) -> np.float32:
    return np.float32(1.0 / math.sqrt(d))


def attention_probs(inp: AttentionInputs, shape: ModelShape) -> np.ndarray:
    """Full causal probability map, [num_q_heads, q_len, kv_len]."""
    inp.validate(shape)
    mask = causal_mask(inp.positions, inp.kv_len)
    scale = _inv_sqrt(shape.head_dim)
    probs = np.empty((shape.num_q_heads, inp.q_len, inp.kv_len), dtype=np.float32)
    for h in range(shape.num_q_heads):
        kv = shape.kv_head_of(h)
        probs[h] = softmax_row(matmul(inp.q[h], inp.k[kv].T) * scale, mask)
    return probs


def dense_attention(inp: AttentionInputs, shape: ModelShape) -> np.ndarray:
    probs = attention_probs(inp, shape)
    out = np.empty_like(inp.q)
    for h in range(shape.num_q_heads):
        out[h] = matmul(probs[h], inp.v[shape.kv_head_of(h)])
    return out


class _OnlineSoftmax:
    """Running (max, sum, weighted accumulator) state for one head."""

    def __init__(self, rows: int, d: int):
        self.m = np.full((rows, 1), -np.inf, dtype=np.float32)
        self.l = np.zeros((rows, 1), dtype=np.float32)
        self.acc = np.zeros((rows, d), dtype=np.float32)

    def update(self, s: np.ndarray, valid: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Fold one key block in; returns (rescale factor, block row max of exp)."""
        masked = np.where(valid, s, -np.inf)
        block_max = masked.max(axis=1, keepdims=True)
        m_new = np.maximum(self.m, block_max)
        # rows with nothing seen yet keep m_new = -inf; guard the subtraction
        seen = np.isfinite(m_new)
        ref = np.where(seen, m_new, 0.0).astype(np.float32)
        alpha = np.where(np.isfinite(self.m), np.exp(self.m - ref), 0.0).astype(np.float32)
        p = np.where(valid, np.exp(np.where(valid, s - ref, 0.0)), 0.0).astype(np.float32)
        self.l = self.l * alpha + p.sum(axis=1, keepdims=True, dtype=np.float32)
        self.acc = self.acc * alpha + matmul(p, v)
        self.m = m_new
        block_peak = np.where(np.isfinite(block_max), np.exp(np.where(np.isfinite(block_max), block_max - ref, 0.0)), 0.0)
        return alpha, block_peak.astype(np.float32)

    def finish(self) -> np.ndarray:
        if np.any(self.l <= 0):
            raise NumericError("query row with no visible key")
        return self.acc / self.l


def _stream_head(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    positions: np.ndarray,
    kv_block: int,
    record_blocks: bool,
    scale: np.float32,
):
    rows, d = q.shape
    kv_len = k.shape[0]
    nb = -(-kv_len // kv_block)
    state = _OnlineSoftmax(rows, d)
    peaks = np.zeros((rows, nb), dtype=np.float32) if record_blocks else None
    last_pos = int(positions.max())
    for j in range(nb):
        lo, hi = j * kv_block, min((j + 1) * kv_block, kv_len)
        if lo > last_pos:
            break
        valid = np.arange(lo, hi)[None, :] <= positions[:, None]
        s = matmul(q, k[lo:hi].T) * scale
        alpha, peak = state.update(s, valid, v[lo:hi])
        if record_blocks:
            peaks[:, :j] *= alpha
            peaks[:, j : j + 1] = peak
    out = state.finish()
    if record_blocks:
        peaks /= state.l
    return out, peaks


def streaming_attention(inp: AttentionInputs, shape: ModelShape, kv_block: Optional[int] = None) -> np.ndarray:
    """Online-softmax attention over key blocks of ``kv_block`` tokens."""
    inp.validate(shape)
    kv_block = kv_block or shape.block_size
    if kv_block <= 0:
        raise ShapeError(f"kv_block must be positive, got {kv_block}")
    scale = _inv_sqrt(shape.head_dim)
    out = np.empty_like(inp.q)
    for h in range(shape.num_q_heads):
        kv = shape.kv_head_of(h)
        out[h], _ = _stream_head(inp.q[h], inp.k[kv], inp.v[kv], inp.positions, kv_block, False, scale)
    return out


def _group_and_normalize(block_max: np.ndarray, shape: ModelShape, block_size: int) -> GroundTruthMap:
    """[num_q_heads, q_len, nb] block maxima -> normalized kv-head map."""
    hq, q_len, nb = block_max.shape
    grouped = block_max.reshape(shape.num_kv_heads, shape.group_size, q_len, nb).max(axis=1)
    totals = grouped.sum(axis=-1, keepdims=True, dtype=np.float32)
    if np.any(totals <= 0):
        raise NumericError("ground-truth row with zero total mass")
    return GroundTruthMap(gt=(grouped / totals).astype(np.float32), block_size=block_size)


def ground_truth_naive(inp: AttentionInputs, shape: ModelShape) -> GroundTruthMap:
    """Materialize the map, column-maxpool per key block, group-max, normalize."""
    probs = attention_probs(inp, shape)
    b = shape.block_size
    nb = shape.num_blocks(inp.kv_len)
    block_max = np.empty((shape.num_q_heads, inp.q_len, nb), dtype=np.float32)
    for h in range(shape.num_q_heads):
        block_max[h] = block_pool(probs[h].T, b, "max").T
    return _group_and_normalize(block_max, shape, b)


def ground_truth_fused(inp: AttentionInputs, shape: ModelShape) -> Tuple[np.ndarray, GroundTruthMap]:
    """One streaming pass yielding both the attention output and the ground truth."""
    inp.validate(shape)
    b = shape.block_size
    nb = shape.num_blocks(inp.kv_len)
    scale = _inv_sqrt(shape.head_dim)
    out = np.empty_like(inp.q)
    block_max = np.zeros((shape.num_q_heads, inp.q_len, nb), dtype=np.float32)
    for h in range(shape.num_q_heads):
        kv = shape.kv_head_of(h)
        out[h], block_max[h] = _stream_head(inp.q[h], inp.k[kv], inp.v[kv], inp.positions, b, True, scale)
    return out, _group_and_normalize(block_max, shape, b)


def ground_truth_fused_varlen(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cu_seqlens: Sequence[int],
    shape: ModelShape,
) -> Tuple[np.ndarray, List[GroundTruthMap]]:
    """Packed variable-length batch: sequences concatenated on the token axis.

    ``cu_seqlens`` holds cumulative boundaries ``[0, n0, n0+n1, ...]``. Each
    sequence has its own causal mask and block grid; nothing attends across
    a boundary.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    bounds = [int(x) for x in cu_seqlens]
    if bounds[0] != 0 or bounds[-1] != q.shape[1] or any(a >= b for a, b in zip(bounds, bounds[1:])):
        raise ShapeError(f"bad cu_seqlens {bounds} for {q.shape[1]} packed tokens")
    if k.shape[1] != q.shape[1]:
        raise ShapeError("packed q and k must have the same token count")
    out = np.empty_like(q)
    maps = []
    for lo, hi in zip(bounds, bounds[1:]):
        seg = AttentionInputs(q=q[:, lo:hi], k=k[:, lo:hi], v=v[:, lo:hi])
        out[:, lo:hi], gt = ground_truth_fused(seg, shape)
        maps.append(gt)
    return out, maps
