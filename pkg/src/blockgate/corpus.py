"""Synthetic query/key/value streams standing in for LLM activations.

``clustered``: keys come in runs around a few cluster centers and each group
of query heads tracks one center at a time, so attention concentrates on the
blocks holding that center's runs. The content lives in a low-frequency
subspace fixed per kv-head. ``local``: queries and keys share a direction, so
after RoPE attention favors recent tokens. ``uniform``: isotropic Gaussian
with score variance 1/d, giving near-uniform block maxima.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .attention import AttentionInputs
from .errors import ShapeError
from .tensor import ModelShape, rope_apply
from .tensorio import load_tensors

KINDS = ("clustered", "local", "uniform")

# clustered-kind constants
N_CLUSTERS = 64
MEAN_KEY_RUN = 4
MEAN_QUERY_RUN = 48
CENTER_NORM = 6.0  # times d**0.25: aligned logit of CENTER_NORM**2 before RoPE
KEY_NOISE = 0.35
QUERY_NOISE = 0.35
MODEL_SEED = 0xB10C  # fixes the per-head content subspace across sequences


def _rotate(x: np.ndarray, shape: ModelShape) -> np.ndarray:
    pos = np.arange(x.shape[1])
    return np.stack([rope_apply(x[h], pos, shape.rope_theta) for h in range(x.shape[0])])


def _runs(rng: np.random.Generator, seq_len: int, mean_len: float, n_labels: int) -> np.ndarray:
    """Per-token labels constant over geometric-length runs."""
    labels = np.empty(seq_len, dtype=np.int64)
    t = 0
    prev = -1
    while t < seq_len:
        length = int(rng.geometric(1.0 / mean_len))
        label = int(rng.integers(n_labels))
        if label == prev:
            label = (label + 1) % n_labels
        labels[t : t + length] = label
        prev = label
        t += length
    return labels


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _content_basis(h: int, d: int) -> np.ndarray:
    """Orthonormal [d, r] basis spanning the slowest-rotating RoPE pairs of kv-head ``h``.

    Fixed per model, like a frozen projection: every sequence's cluster
    centers live in it, so RoPE barely changes content scores over a few
    thousand positions.
    """
    r = max(2, d // 4) & ~1
    basis = np.zeros((d, r))
    rot = np.random.default_rng([MODEL_SEED, h, d]).standard_normal((r, r))
    basis[d - r :] = np.linalg.qr(rot)[0]
    return basis


def _clustered(rng, shape: ModelShape, seq_len: int):
    hk, g, d = shape.num_kv_heads, shape.group_size, shape.head_dim
    k = np.empty((hk, seq_len, d))
    q = np.empty((hk * g, seq_len, d))
    for h in range(hk):
        basis = _content_basis(h, d)
        r = basis.shape[1]
        centers = _unit(rng, N_CLUSTERS, r) @ basis.T * (CENTER_NORM * d**0.25)
        key_labels = _runs(rng, seq_len, MEAN_KEY_RUN, N_CLUSTERS)
        k[h] = centers[key_labels] + KEY_NOISE * rng.standard_normal((seq_len, r)) @ basis.T
        # the group tracks one center at a time, and only one already seen
        focus = np.empty(seq_len, dtype=np.int64)
        t = 0
        while t < seq_len:
            length = int(rng.geometric(1.0 / MEAN_QUERY_RUN))
            seen = np.unique(key_labels[: t + 1])
            focus[t : t + length] = seen[rng.integers(seen.size)]
            t += length
        for j in range(g):
            q[h * g + j] = centers[focus] + QUERY_NOISE * rng.standard_normal((seq_len, r)) @ basis.T
    return q, k


def _local(rng, shape: ModelShape, seq_len: int):
    hk, g, d = shape.num_kv_heads, shape.group_size, shape.head_dim
    k = np.empty((hk, seq_len, d))
    q = np.empty((hk * g, seq_len, d))
    for h in range(hk):
        # same direction in every dim: RoPE makes the score fall off with distance
        direction = _unit(rng, 1, d)[0] * (CENTER_NORM * d**0.25)
        k[h] = direction + KEY_NOISE * rng.standard_normal((seq_len, d))
        for j in range(g):
            q[h * g + j] = direction + QUERY_NOISE * rng.standard_normal((seq_len, d))
    return q, k


def _uniform(rng, shape: ModelShape, seq_len: int):
    hk, g, d = shape.num_kv_heads, shape.group_size, shape.head_dim
    sigma = d ** -0.25
    return (
        sigma * rng.standard_normal((hk * g, seq_len, d)),
        sigma * rng.standard_normal((hk, seq_len, d)),
    )


def synth_qk(kind: str, shape: ModelShape, seq_len: int, seed: int) -> AttentionInputs:
    """Deterministic synthetic sequence; attention runs on RoPE-rotated q/k."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    if seq_len < 1:
        raise ShapeError(f"seq_len must be >= 1, got {seq_len}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    q_nope, k_nope = {"clustered": _clustered, "local": _local, "uniform": _uniform}[kind](rng, shape, seq_len)
    v = rng.standard_normal((shape.num_kv_heads, seq_len, shape.head_dim))
    q_nope = q_nope.astype(np.float32)
    k_nope = k_nope.astype(np.float32)
    return AttentionInputs(
        q=_rotate(q_nope, shape),
        k=_rotate(k_nope, shape),
        v=v.astype(np.float32),
        q_nope=q_nope,
        k_nope=k_nope,
    )


@dataclass
class CorpusSpec:
    """Either ``kind``+``seed`` (synthetic) or ``paths`` (tensor dumps).

    A dump file holds q, k, v records, optionally followed by q_nope, k_nope.
    """

    shape: ModelShape
    seq_lens: List[int] = field(default_factory=lambda: [512] * 16)
    kind: Optional[str] = "clustered"
    seed: int = 0
    paths: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.paths and any(n < 1 for n in self.seq_lens):
            raise ShapeError("every sequence length must be >= 1")


def load_inputs(path: str | os.PathLike, shape: ModelShape) -> AttentionInputs:
    tensors = load_tensors(path)
    if len(tensors) not in (3, 5):
        raise ShapeError(f"{path}: expected 3 or 5 tensors (q, k, v[, q_nope, k_nope]), got {len(tensors)}")
    inp = AttentionInputs(*tensors[:3])
    if len(tensors) == 5:
        inp.q_nope, inp.k_nope = tensors[3], tensors[4]
    inp.validate(shape)
    return inp


def build_corpus(spec: CorpusSpec) -> List[AttentionInputs]:
    if spec.paths:
        return [load_inputs(p, spec.shape) for p in spec.paths]
    return [synth_qk(spec.kind, spec.shape, n, spec.seed * 100003 + i) for i, n in enumerate(spec.seq_lens)]
