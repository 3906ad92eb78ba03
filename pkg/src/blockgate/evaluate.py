"""Experiment harness: oracle sweeps, policy comparison, kernel cost model, decode traces.

Every metric here is computed per (sequence, query row, kv-head) with the
decode-time view of the cache: row ``t`` sees ``(t + 1) // b`` finalized
gate blocks plus the forced newest block.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .attention import AttentionInputs, dense_attention, ground_truth_naive
from .errors import NumericError
from .gate import GateParams, gate_forward
from .tensor import ModelShape, softmax_row
from .decode import (
    BlockSelection,
    DecodeSession,
    SparsifyPolicy,
    quest_metadata,
    quest_scores,
    select_blocks,
    sparse_decode,
)

POLICIES = ("seer-budget", "seer-threshold", "quest", "oracle")


def max_workers() -> int:
    """Worker threads for independent sweep cells, capped by SEER_THREADS."""
    cap = os.environ.get("SEER_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValueError(f"SEER_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def ordered_map(fn: Callable, items: Sequence) -> list:
    """``map`` over a thread pool; results come back in input order."""
    workers = min(max_workers(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------- metrics


def block_recall(selected: np.ndarray, oracle: np.ndarray) -> float:
    """|selected ∩ oracle| / |oracle|."""
    if len(oracle) == 0:
        raise ValueError("empty oracle selection")
    return len(np.intersect1d(selected, oracle)) / len(oracle)


def gt_coverage(gt_row: np.ndarray, selected: np.ndarray) -> float:
    return min(1.0, float(np.sum(gt_row[selected], dtype=np.float64)))


def relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    ref64 = ref.astype(np.float64)
    den = np.linalg.norm(ref64)
    num = np.linalg.norm(out.astype(np.float64) - ref64)
    return float(num / den) if den > 0 else float(num)


def eval_rows(seq_len: int, block_size: int, count: int = 16, start_frac: float = 0.5) -> np.ndarray:
    """Evenly spaced decode rows in the back part of a sequence."""
    lo = min(seq_len - 1, max(block_size, int(seq_len * start_frac)))
    return np.unique(np.linspace(lo, seq_len - 1, count).round().astype(np.int64))


# ------------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    """Config echo, ordered metric cells and optional plot-ready series."""

    name: str
    config: dict
    cells: List[dict] = field(default_factory=list)
    series: List[dict] = field(default_factory=list)

    BOUNDED = ("recall", "coverage")

    def validate(self) -> None:
        for cell in self.cells:
            for key in self.BOUNDED:
                if key in cell and not 0.0 <= cell[key] <= 1.0:
                    raise NumericError(f"{self.name}: {key}={cell[key]} outside [0, 1] in {cell}")
            for key, value in cell.items():
                if key.endswith("speedup") and value is not None and not value > 0:
                    raise NumericError(f"{self.name}: {key}={value} is not positive")
                if isinstance(value, float) and not math.isfinite(value):
                    raise NumericError(f"{self.name}: {key} is not finite in {cell}")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(
            {"name": self.name, "config": self.config, "cells": self.cells, "series": self.series},
            indent=2,
            sort_keys=False,
        )

    def to_csv(self) -> str:
        self.validate()
        return _rows_to_csv(self.cells)

    def series_csv(self) -> str:
        return _rows_to_csv(self.series)

    def write(self, out_dir: str | os.PathLike, fmt: str = "json") -> List[str]:
        """Write ``<name>.json`` or ``<name>.csv`` (+ ``<name>_series.csv``)."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        if fmt == "json":
            body = self.to_json()
            paths.append(os.path.join(out_dir, f"{self.name}.json"))
            with open(paths[-1], "w") as fh:
                fh.write(body + "\n")
        elif fmt == "csv":
            body = self.to_csv()
            paths.append(os.path.join(out_dir, f"{self.name}.csv"))
            with open(paths[-1], "w", newline="") as fh:
                fh.write(body)
            if self.series:
                paths.append(os.path.join(out_dir, f"{self.name}_series.csv"))
                with open(paths[-1], "w", newline="") as fh:
                    fh.write(self.series_csv())
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        return paths


def _rows_to_csv(rows: Sequence[dict]) -> str:
    cols: List[str] = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def _fmt(value) -> str:
    # repr round-trips floats exactly, so CSV and JSON agree bit for bit
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_csv_cells(text: str) -> List[dict]:
    """Parse ``to_csv`` output back into dicts of numbers where possible."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
                continue
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return rows


# ---------------------------------------------------------------- cost model


@dataclass(frozen=True)
class CostModel:
    """Bytes moved by one decode step; the kernel is taken to be I/O bound."""

    shape: ModelShape
    dtype_bytes: int = 4

    @property
    def bytes_per_block(self) -> int:
        s = self.shape
        return s.block_size * 2 * s.head_dim * s.num_kv_heads * self.dtype_bytes

    @property
    def gate_bytes_per_block(self) -> int:
        return self.shape.gate_dim * self.shape.num_kv_heads * self.dtype_bytes

    def dense_bytes(self, seq_len: int) -> int:
        return self.shape.num_blocks(seq_len) * self.bytes_per_block

    def sparse_bytes(self, seq_len: int, selected_blocks: int) -> int:
        finalized = seq_len // self.shape.block_size
        return selected_blocks * self.bytes_per_block + finalized * self.gate_bytes_per_block

    def selected_blocks(self, seq_len: int, sparsity: float) -> int:
        nb = self.shape.num_blocks(seq_len)
        # tolerance keeps e.g. (1 - 0.9) * 60 from rounding up past 6
        return max(1, min(nb, math.ceil((1.0 - sparsity) * nb - 1e-9)))

    def modeled_speedup(self, seq_len: int, sparsity: float) -> float:
        sel = self.selected_blocks(seq_len, sparsity)
        return self.dense_bytes(seq_len) / self.sparse_bytes(seq_len, sel)

    @staticmethod
    def ceiling(sparsity: float) -> float:
        return math.inf if sparsity >= 1 else 1.0 / (1.0 - sparsity)


# -------------------------------------------------------------- oracle sweep


def _row_output(inp: AttentionInputs, t: int, heads: List[np.ndarray], shape: ModelShape) -> np.ndarray:
    sel = BlockSelection([heads], [t + 1], shape.block_size)
    return sparse_decode(inp.q[:, t : t + 1], inp.k[:, : t + 1], inp.v[:, : t + 1], sel, shape)[:, 0]


def eval_oracle(
    corpus: Sequence[AttentionInputs],
    shape: ModelShape,
    block_sizes: Sequence[int],
    budgets: Sequence[int],
    rows_per_seq: int = 16,
    start_frac: float = 0.5,
) -> ExperimentReport:
    """Coverage and output error of oracle selection per (block size, token budget).

    Budgets smaller than a block are skipped for that block size. Rows are
    drawn from the last ``1 - start_frac`` of each sequence.
    """
    dense = [dense_attention(inp, shape) for inp in corpus]
    cells_in = [(b, budget) for b in block_sizes for budget in budgets if budget >= b]

    def gt_for(b):
        sh = _with_block(shape, b)
        return [ground_truth_naive(inp, sh).gt for inp in corpus]

    gts = dict(zip(block_sizes, ordered_map(gt_for, list(block_sizes))))

    def run(cell):
        b, budget = cell
        sh = _with_block(shape, b)
        policy = SparsifyPolicy("oracle", b, budget=budget)
        cov, err, frac = [], [], []
        for inp, gt, ref in zip(corpus, gts[b], dense):
            for t in eval_rows(inp.kv_len, b, rows_per_seq, start_frac):
                heads = select_blocks(policy, gt[:, t, : t // b + 1], t + 1)
                out = _row_output(inp, t, heads, sh)
                for h, ix in enumerate(heads):
                    cov.append(gt_coverage(gt[h, t], ix))
                    frac.append(len(ix) / (t // b + 1))
                err.append(relative_error(out, ref[:, t]))
        return {
            "block_size": b,
            "budget": budget,
            "coverage": float(np.mean(cov)),
            "error": float(np.mean(err)),
            "block_fraction": float(np.mean(frac)),
        }

    report = ExperimentReport(
        "eval_oracle",
        {"shape": shape.to_dict(), "block_sizes": list(block_sizes), "budgets": list(budgets),
         "rows_per_seq": rows_per_seq, "start_frac": start_frac},
    )
    report.cells = ordered_map(run, cells_in)
    report.validate()
    return report


def _with_block(shape: ModelShape, b: int) -> ModelShape:
    d = shape.to_dict()
    d["block_size"] = int(b)
    return ModelShape.from_dict(d)


# ------------------------------------------------------------ policy sweep


@dataclass
class _SeqView:
    inp: AttentionInputs
    gt: np.ndarray
    dense: np.ndarray
    logits: Optional[np.ndarray]
    kmin: np.ndarray
    kmax: np.ndarray


def _prepare(inp: AttentionInputs, shape: ModelShape, params: Optional[GateParams]) -> _SeqView:
    b = shape.block_size
    logits = gate_forward(inp, params, shape, mode="logits").s if params is not None else None
    kmin, kmax = quest_metadata(inp.k, b, inp.kv_len // b)
    return _SeqView(inp, ground_truth_naive(inp, shape).gt, dense_attention(inp, shape), logits, kmin, kmax)


def _policy_scores(view: _SeqView, policy: str, t: int, shape: ModelShape) -> np.ndarray:
    b = shape.block_size
    nbf = (t + 1) // b
    if policy == "oracle":
        return view.gt[:, t, : t // b + 1]
    if policy == "quest":
        return quest_scores(view.inp.q[:, t], view.kmin[:, :nbf], view.kmax[:, :nbf], shape)
    if view.logits is None:
        raise ValueError(f"policy {policy!r} needs gate parameters")
    logits = view.logits[:, t, :nbf]
    if policy == "seer-threshold":
        return softmax_row(logits) if nbf else logits
    return logits


def _policy_object(policy: str, shape: ModelShape, budget: Optional[int], threshold: Optional[float]) -> SparsifyPolicy:
    b = shape.block_size
    if policy == "seer-threshold":
        return SparsifyPolicy("threshold", b, threshold=threshold)
    mode = {"seer-budget": "budget", "quest": "quest", "oracle": "oracle"}[policy]
    return SparsifyPolicy(mode, b, budget=budget)


def policy_cell(
    views: Sequence[_SeqView],
    shape: ModelShape,
    policy: str,
    budget: Optional[int] = None,
    threshold: Optional[float] = None,
    rows_per_seq: int = 16,
    start_frac: float = 0.5,
) -> dict:
    """Recall vs the oracle holding the same number of blocks, plus coverage and error."""
    b = shape.block_size
    pol = _policy_object(policy, shape, budget, threshold)
    rec, cov, err, act = [], [], [], []
    for view in views:
        for t in eval_rows(view.inp.kv_len, b, rows_per_seq, start_frac):
            heads = select_blocks(pol, _policy_scores(view, policy, t, shape), t + 1)
            out = _row_output(view.inp, t, heads, shape)
            err.append(relative_error(out, view.dense[:, t]))
            for h, ix in enumerate(heads):
                oracle_pol = SparsifyPolicy("oracle", b, budget=len(ix) * b)
                oracle_ix = select_blocks(oracle_pol, view.gt[h : h + 1, t, : t // b + 1], t + 1)[0]
                rec.append(block_recall(ix, oracle_ix))
                cov.append(gt_coverage(view.gt[h, t], ix))
                act.append(sum(min(b, t + 1 - j * b) for j in ix))
    return {
        "policy": policy,
        "budget": budget,
        "threshold": threshold,
        "recall": float(np.mean(rec)),
        "coverage": float(np.mean(cov)),
        "error": float(np.mean(err)),
        "activated_tokens": float(np.mean(act)),
    }


def activation_series(
    view: _SeqView, shape: ModelShape, policy: str, budget=None, threshold=None, stride: int = 1
) -> List[dict]:
    """Activated tokens per decode position (kv-head 0) for one policy."""
    b = shape.block_size
    pol = _policy_object(policy, shape, budget, threshold)
    out = []
    for t in range(0, view.inp.kv_len, stride):
        ix = select_blocks(pol, _policy_scores(view, policy, t, shape), t + 1)[0]
        out.append(
            {
                "policy": policy,
                "budget": budget,
                "threshold": threshold,
                "seq_len": t + 1,
                "activated_tokens": int(sum(min(b, t + 1 - j * b) for j in ix)),
            }
        )
    return out


def eval_policies(
    corpus: Sequence[AttentionInputs],
    shape: ModelShape,
    params: Optional[GateParams],
    budgets: Sequence[int],
    thresholds: Sequence[float] = (),
    policies: Sequence[str] = POLICIES,
    rows_per_seq: int = 16,
    series_stride: int = 0,
    start_frac: float = 0.5,
) -> ExperimentReport:
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}; expected one of {POLICIES}")
    views = ordered_map(lambda inp: _prepare(inp, shape, params), list(corpus))
    jobs = []
    for p in policies:
        if p == "seer-threshold":
            jobs.extend((p, None, t) for t in thresholds)
        else:
            jobs.extend((p, budget, None) for budget in budgets)
    report = ExperimentReport(
        "eval_policies",
        {
            "shape": shape.to_dict(),
            "budgets": list(budgets),
            "thresholds": list(thresholds),
            "policies": list(policies),
            "rows_per_seq": rows_per_seq,
            "start_frac": start_frac,
            "quest_reduction": "per-q-head bound summed over the group",
        },
    )
    report.cells = ordered_map(lambda j: policy_cell(views, shape, j[0], j[1], j[2], rows_per_seq, start_frac), jobs)
    if series_stride and views:
        for p, budget, thr in jobs:
            if p in ("seer-budget", "seer-threshold"):
                report.series.extend(activation_series(views[0], shape, p, budget, thr, series_stride))
    report.validate()
    return report


# ------------------------------------------------------------ kernel bench


def _median_time(fn: Callable[[], object], trials: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def random_selection(
    rng: np.random.Generator, batch: int, shape: ModelShape, seq_len: int, n_blocks: int
) -> BlockSelection:
    """``n_blocks`` per (sequence, kv-head), newest always included."""
    nb = shape.num_blocks(seq_len)
    newest = nb - 1
    rows = []
    for _ in range(batch):
        heads = []
        for _ in range(shape.num_kv_heads):
            others = rng.permutation(newest)[: max(0, n_blocks - 1)]
            heads.append(np.union1d(others, [newest]).astype(np.int64))
        rows.append(heads)
    return BlockSelection(rows, [seq_len] * batch, shape.block_size)


def bench_kernel(
    shape: ModelShape,
    seq_lens: Sequence[int],
    batches: Sequence[int],
    sparsities: Sequence[float],
    trials: int = 9,
    warmup: int = 3,
    seed: int = 0,
) -> ExperimentReport:
    """Wall-clock of sparse decode vs the all-blocks decode, next to the cost model.

    Timed serially: concurrent cells would disturb each other's clocks.
    """
    if trials < 1 or warmup < 0:
        raise ValueError("trials must be >= 1 and warmup >= 0")
    cost = CostModel(shape)
    report = ExperimentReport(
        "bench_kernel",
        {"shape": shape.to_dict(), "seq_lens": list(seq_lens), "batches": list(batches),
         "sparsities": list(sparsities), "trials": trials, "warmup": warmup, "seed": seed},
    )
    for n in seq_lens:
        for batch in batches:
            rng = np.random.default_rng([seed, n, batch])
            hq, hk, d = shape.num_q_heads, shape.num_kv_heads, shape.head_dim
            q = rng.standard_normal((batch, hq, 1, d)).astype(np.float32)
            k = rng.standard_normal((batch, hk, n, d)).astype(np.float32)
            v = rng.standard_normal((batch, hk, n, d)).astype(np.float32)
            nb = shape.num_blocks(n)
            full = BlockSelection([[np.arange(nb)] * hk] * batch, [n] * batch, shape.block_size)
            dense_t = _median_time(lambda: sparse_decode(q, k, v, full, shape), trials, warmup)
            for s in sparsities:
                n_sel = cost.selected_blocks(n, s)
                sel = random_selection(rng, batch, shape, n, n_sel)
                sparse_t = _median_time(lambda: sparse_decode(q, k, v, sel, shape), trials, warmup)
                report.cells.append(
                    {
                        "seq_len": n,
                        "batch": batch,
                        "sparsity": float(s),
                        "selected_blocks": n_sel,
                        "dense_seconds": dense_t,
                        "sparse_seconds": sparse_t,
                        "measured_speedup": dense_t / sparse_t,
                        "modeled_speedup": cost.modeled_speedup(n, s),
                        "ceiling": CostModel.ceiling(s) if s < 1 else None,
                    }
                )
    report.validate()
    return report


# -------------------------------------------------------------- decode sim


def decode_sim(
    layers: Sequence[AttentionInputs],
    shape: ModelShape,
    params: Optional[GateParams],
    policy: SparsifyPolicy,
    prefill: int,
    steps: Optional[int] = None,
    dense_layers: Iterable[int] = (),
) -> ExperimentReport:
    """Token-by-token decode over one sequence per layer.

    ``dense_layers`` lists layer indices that decode with full attention
    regardless of ``policy`` (hybrid configurations). Each trace row records
    the selection size, recall against the oracle holding as many blocks, and
    output error against dense attention.
    """
    dense_layers = set(int(i) for i in dense_layers)
    total = min(inp.kv_len for inp in layers)
    if not 0 < prefill < total:
        raise ValueError(f"prefill must be in 1..{total - 1}, got {prefill}")
    end = total if steps is None else min(total, prefill + steps)
    report = ExperimentReport(
        "decode_sim",
        {"shape": shape.to_dict(), "policy": policy.mode, "budget": policy.budget,
         "threshold": policy.threshold, "prefill": prefill, "end": end,
         "num_layers": len(layers), "dense_layers": sorted(dense_layers)},
    )

    def run_layer(li):
        inp = layers[li]
        pol = SparsifyPolicy("dense", shape.block_size) if li in dense_layers else policy
        ref = dense_attention(inp, shape)
        gt = ground_truth_naive(inp, shape).gt
        b = shape.block_size
        sess = DecodeSession(shape, params, pol, capacity=inp.kv_len)
        sess.prefill(_prefix(inp, prefill))
        rows = []
        for t in range(prefill, end):
            res = sess.step_from(inp, t)
            heads = res.selection.indices[0]
            recall = []
            for h, ix in enumerate(heads):
                oracle = SparsifyPolicy("oracle", b, budget=len(ix) * b)
                recall.append(block_recall(ix, select_blocks(oracle, gt[h : h + 1, t, : t // b + 1], t + 1)[0]))
            rows.append(
                {
                    "layer": li,
                    "step": t - prefill,
                    "seq_len": t + 1,
                    "policy": pol.mode,
                    "num_selected_blocks": res.selection.max_selected_blocks,
                    "activated_tokens": int(max(res.selection.activated_tokens(0))),
                    "recall": float(np.mean(recall)),
                    "error": relative_error(res.output, ref[:, t]),
                }
            )
        return rows

    for rows in ordered_map(run_layer, list(range(len(layers)))):
        report.cells.extend(rows)
    report.validate()
    return report


def _prefix(inp: AttentionInputs, n: int) -> AttentionInputs:
    return AttentionInputs(
        q=inp.q[:, :n],
        k=inp.k[:, :n],
        v=inp.v[:, :n],
        q_nope=None if inp.q_nope is None else inp.q_nope[:, :n],
        k_nope=None if inp.k_nope is None else inp.k_nope[:, :n],
    )


def summarize(report: ExperimentReport, keys: Sequence[str]) -> Dict[str, float]:
    return {k: float(np.mean([c[k] for c in report.cells])) for k in keys}
