"""Dense float32 primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C order.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

PoolKind = Literal["max", "min", "avg"]

# Upper bound on the number of float32 partial products materialized at once by
# ``matmul``; keeps peak memory near 16 MiB.
_MATMUL_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class ModelShape:
    """Head/block geometry threaded through every module.

    ``gate_dim`` defaults to ``head_dim``. ``gate_rope`` switches the rotary
    embedding inside the gate on or off.
    """

    num_kv_heads: int = 2
    group_size: int = 4
    head_dim: int = 64
    gate_dim: Optional[int] = None
    block_size: int = 64
    rope_theta: float = 10000.0
    gate_rope: bool = True

    def __post_init__(self) -> None:
        if self.gate_dim is None:
            object.__setattr__(self, "gate_dim", self.head_dim)
        for name in ("num_kv_heads", "group_size", "head_dim", "gate_dim", "block_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")
        if not self.rope_theta > 0:
            raise ShapeError(f"rope_theta must be positive, got {self.rope_theta}")

    @property
    def num_q_heads(self) -> int:
        return self.num_kv_heads * self.group_size

    def num_blocks(self, seq_len: int) -> int:
        return -(-seq_len // self.block_size)

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size

    def to_dict(self) -> dict:
        return {
            "num_kv_heads": int(self.num_kv_heads),
            "group_size": int(self.group_size),
            "head_dim": int(self.head_dim),
            "gate_dim": int(self.gate_dim),
            "block_size": int(self.block_size),
            "rope_theta": float(self.rope_theta),
            "gate_rope": bool(self.gate_rope),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelShape":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b) -> np.ndarray:
    """2-D float32 product with a fixed summation order.

    Every output element is accumulated strictly left to right over the inner
    dimension, independent of the other output elements, so results are
    bit-reproducible and do not depend on how many rows are computed together.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.float32)
    if m == 0 or n == 0 or k == 0:
        return out
    step = max(1, _MATMUL_CHUNK_ELEMS // (m * n))
    at = np.ascontiguousarray(a.T)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _ordered_products(at, b, out, step)
    return check_finite(out, "matmul output")


def _ordered_products(at: np.ndarray, b: np.ndarray, out: np.ndarray, step: int) -> np.ndarray:
    k = at.shape[0]
    m, n = out.shape
    for start in range(0, k, step):
        stop = min(k, start + step)
        # terms[0] carries the running sum so the chain continues across chunks;
        # reducing the outermost axis of a C-contiguous array adds slices in order
        terms = np.empty((stop - start + 1, m, n), dtype=np.float32)
        terms[0] = out
        np.multiply(at[start:stop, :, None], b[start:stop, None, :], out=terms[1:])
        out = np.add.reduce(terms, axis=0, dtype=np.float32)
    return out


def softmax_row(x, mask=None) -> np.ndarray:
    """Softmax over the last axis; ``mask`` is True where an entry participates."""
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if x.size and not np.all(mask.any(axis=-1)):
        raise NumericError("softmax over a fully masked row")
    shifted = np.where(mask, x, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x - row_max, 0.0)), 0.0).astype(np.float32)
    out = e / e.sum(axis=-1, keepdims=True, dtype=np.float32)
    return check_finite(out.astype(np.float32), "softmax output")


def _running_reduce(blocks: np.ndarray, kind: str) -> np.ndarray:
    # blocks: [nb, rows, d]; rows combined one at a time in order
    acc = blocks[:, 0].copy()
    for r in range(1, blocks.shape[1]):
        if kind == "max":
            np.maximum(acc, blocks[:, r], out=acc)
        elif kind == "min":
            np.minimum(acc, blocks[:, r], out=acc)
        else:
            acc += blocks[:, r]
    if kind == "avg":
        acc /= np.float32(blocks.shape[1])
    return acc


def block_pool(x, b: int, kind: PoolKind) -> np.ndarray:
    """Non-overlapping pooling of ``x[seq, d]`` over row blocks of size ``b``.

    A trailing partial block pools only the rows it has.
    """
    x = as_tensor(x)
    if b <= 0:
        raise ShapeError(f"block size must be positive, got {b}")
    if kind not in ("max", "min", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"block_pool expects [seq>=1, d], got {x.shape}")
    seq, d = x.shape
    full = seq // b
    parts = []
    if full:
        parts.append(_running_reduce(x[: full * b].reshape(full, b, d), kind))
    if seq % b:
        parts.append(_running_reduce(x[full * b :][None], kind))
    return np.concatenate(parts, axis=0)


def block_pool_backward(grad_out, x, b: int, kind: PoolKind) -> np.ndarray:
    """Gradient of ``block_pool`` with respect to ``x``.

    Max/min route the whole gradient to the first row attaining the extremum;
    avg spreads it evenly over the block's rows.
    """
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    seq, d = x.shape
    grad = np.zeros_like(x)
    cols = np.arange(d)
    for j in range(grad_out.shape[0]):
        lo, hi = j * b, min((j + 1) * b, seq)
        chunk = x[lo:hi]
        if kind == "avg":
            grad[lo:hi] += grad_out[j] / np.float32(hi - lo)
        else:
            idx = chunk.argmax(axis=0) if kind == "max" else chunk.argmin(axis=0)
            grad[lo + idx, cols] += grad_out[j]
    return grad


def rope_angles(positions: Sequence[int], d: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [len(positions), d // 2]."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos * inv_freq[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rope_apply(x, positions: Sequence[int], theta: float = 10000.0, inverse: bool = False) -> np.ndarray:
    """Rotary embedding on interleaved pairs (2i, 2i+1).

    Pair i of a row at position p is rotated by ``p * theta**(-2i/d)``.
    ``inverse=True`` rotates by the negative angle (the transpose).
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"rope_apply expects [n, d], got {x.shape}")
    n, d = x.shape
    if d % 2:
        raise ShapeError(f"rotary embedding needs an even width, got {d}")
    if len(positions) != n:
        raise ShapeError(f"{len(positions)} positions for {n} rows")
    cos, sin = rope_angles(positions, d, theta)
    if inverse:
        sin = -sin
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first; ties go to the lower index."""
    scores = np.asarray(scores).reshape(-1)
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    order = np.lexsort((np.arange(scores.size), -scores.astype(np.float64)))
    return order[: min(k, scores.size)].astype(np.int64)


def causal_mask(q_positions: Sequence[int], kv_len: int) -> np.ndarray:
    """[q_len, kv_len] boolean mask: query at position p sees keys 0..p."""
    pos = np.asarray(q_positions).reshape(-1, 1)
    return np.arange(kv_len)[None, :] <= pos

