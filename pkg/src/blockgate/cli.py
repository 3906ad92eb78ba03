"""``blockgate`` command line.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import evaluate as ev
from .checkpoint import MAGIC as CKPT_MAGIC, read_checkpoint, save_checkpoint
from .corpus import CorpusSpec, build_corpus, synth_qk
from .decode import SparsifyPolicy
from .errors import CheckpointError, NumericError, ShapeError, TensorFormatError
from .tensor import ModelShape
from .tensorio import load_tensors, save_tensors
from .train import TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("blockgate")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _shape(cfg: dict) -> ModelShape:
    return ModelShape.from_dict(cfg.get("shape", {}))


def _seed(args, cfg: dict) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _corpus_spec(cfg: dict, shape: ModelShape, seed: int) -> CorpusSpec:
    c = cfg.get("corpus", {})
    if "seq_lens" in c:
        seq_lens = [int(n) for n in c["seq_lens"]]
    else:
        seq_lens = [int(c.get("seq_len", 512))] * int(c.get("num_seqs", 16))
    return CorpusSpec(shape, seq_lens, c.get("kind", "clustered"), int(c.get("seed", seed)), list(c.get("paths", [])))


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _emit(report: ev.ExperimentReport, args) -> None:
    for path in report.write(_out_dir(args), args.format):
        print(path)


# ---------------------------------------------------------------- commands


def cmd_train_gate(args, cfg: dict) -> int:
    if args.config is None:
        raise UsageError("train-gate requires --config")
    shape = _shape(cfg)
    seed = _seed(args, cfg)
    t = cfg.get("train", {})
    config = TrainConfig(
        lr=float(t.get("lr", 1e-3)),
        steps=int(t.get("steps", 800)),
        batch=int(t.get("batch", 16)),
        seed=seed,
        weight_decay=float(t.get("weight_decay", 0.01)),
    )
    result = train(config, _corpus_spec(cfg, shape, seed))
    out = _out_dir(args)
    ckpt = os.path.join(out, "gate.ckpt")
    save_checkpoint(result.params, ckpt, shape, steps=config.steps, seed=seed, final_loss=result.losses[-1])
    write_loss_csv(os.path.join(out, "loss.csv"), result.history)
    print(f"final_loss {result.losses[-1]!r}")
    print(ckpt)
    return EXIT_OK


def cmd_eval_oracle(args, cfg: dict) -> int:
    shape = _shape(cfg)
    e = cfg.get("eval", {})
    corpus = build_corpus(_corpus_spec(cfg, shape, _seed(args, cfg)))
    report = ev.eval_oracle(
        corpus,
        shape,
        [int(b) for b in e.get("block_sizes", [16, 32, 64])],
        [int(b) for b in e.get("budgets", [4 * shape.block_size])],
        int(e.get("rows_per_seq", 16)),
        float(e.get("start_frac", 0.5)),
    )
    _emit(report, args)
    return EXIT_OK


def cmd_eval_policies(args, cfg: dict) -> int:
    e = cfg.get("eval", {})
    path = args.checkpoint or e.get("checkpoint")
    if not path:
        raise UsageError("eval-policies requires --checkpoint or eval.checkpoint")
    params, shape, _ = read_checkpoint(path)
    corpus = build_corpus(_corpus_spec(cfg, shape, _seed(args, cfg)))
    report = ev.eval_policies(
        corpus,
        shape,
        params,
        [int(b) for b in e.get("budgets", [4 * shape.block_size])],
        [float(t) for t in e.get("thresholds", [])],
        e.get("policies", list(ev.POLICIES)),
        int(e.get("rows_per_seq", 16)),
        int(e.get("series_stride", 0)),
        float(e.get("start_frac", 0.5)),
    )
    _emit(report, args)
    return EXIT_OK


def cmd_bench_kernel(args, cfg: dict) -> int:
    b = cfg.get("bench", {})
    report = ev.bench_kernel(
        _shape(cfg),
        [int(n) for n in b.get("seq_lens", [1024, 4096])],
        [int(n) for n in b.get("batches", [1])],
        [float(s) for s in b.get("sparsities", [0.0, 0.5, 0.7, 0.9])],
        int(b.get("trials", 9)),
        int(b.get("warmup", 3)),
        _seed(args, cfg),
    )
    _emit(report, args)
    return EXIT_OK


def cmd_decode_sim(args, cfg: dict) -> int:
    d = cfg.get("decode", {})
    path = args.checkpoint or d.get("checkpoint")
    if path:
        params, shape, _ = read_checkpoint(path)
    else:
        params, shape = None, _shape(cfg)
    mode = d.get("policy", "budget")
    if mode in ("budget", "threshold") and params is None:
        raise UsageError(f"decode policy {mode!r} requires a checkpoint")
    policy = SparsifyPolicy(
        mode,
        shape.block_size,
        budget=int(d["budget"]) if "budget" in d else (4 * shape.block_size if mode != "threshold" else None),
        threshold=float(d["threshold"]) if "threshold" in d else None,
    )
    seed = _seed(args, cfg)
    seq_len = int(d.get("seq_len", 512))
    layers = [synth_qk(d.get("kind", "clustered"), shape, seq_len, seed * 1009 + i) for i in range(int(d.get("num_layers", 1)))]
    report = ev.decode_sim(
        layers,
        shape,
        params,
        policy,
        int(d.get("prefill", seq_len // 2)),
        int(d["steps"]) if "steps" in d else None,
        [int(i) for i in d.get("dense_layers", [])],
    )
    _emit(report, args)
    return EXIT_OK


def cmd_inspect(args, cfg: dict) -> int:
    with open(args.path, "rb") as fh:
        head = fh.read(4)
    if head == CKPT_MAGIC:
        params, shape, header = read_checkpoint(args.path)
        print(f"checkpoint {args.path}")
        print(json.dumps(header, sort_keys=True))
        tensors = [params.w_q, params.w_k]
    else:
        tensors = load_tensors(args.path)
        print(f"tensor file {args.path}: {len(tensors)} tensor(s)")
    for i, t in enumerate(tensors):
        if t.size:
            stats = f"min {float(t.min())!r} max {float(t.max())!r} mean {float(t.mean(dtype=np.float64))!r}"
        else:
            stats = "empty"
        print(f"[{i}] rank {t.ndim} dims {list(t.shape)} {stats}")
    return EXIT_OK


def cmd_dump_tensors(args, cfg: dict) -> int:
    if args.source:
        tensors = load_tensors(args.source)
    else:
        shape = _shape(cfg)
        inp = synth_qk(args.kind, shape, args.seq_len, _seed(args, cfg))
        tensors = [inp.q, inp.k, inp.v, inp.q_nope, inp.k_nope]
    save_tensors(args.path, tensors)
    print(args.path)
    return EXIT_OK


COMMANDS = {
    "train-gate": cmd_train_gate,
    "eval-oracle": cmd_eval_oracle,
    "eval-policies": cmd_eval_policies,
    "bench-kernel": cmd_bench_kernel,
    "decode-sim": cmd_decode_sim,
    "inspect": cmd_inspect,
    "dump-tensors": cmd_dump_tensors,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; suppressed defaults keep a value
    # given before the subcommand from being reset
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="TOML config file")
    common.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
    common.add_argument("--out", default=d("out"), help="output directory (default: out)")
    common.add_argument("--format", choices=("csv", "json"), default=d("json"), help="report format")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="blockgate", description="Learned block-sparse attention gate toolkit.", parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-gate", parents=[common], help="distill a gate; writes gate.ckpt and loss.csv")
    sub.add_parser("eval-oracle", parents=[common], help="oracle coverage/error sweep")
    sp = sub.add_parser("eval-policies", parents=[common], help="compare selection policies")
    sp.add_argument("--checkpoint")
    sub.add_parser("bench-kernel", parents=[common], help="sparse decode wall-clock vs cost model")
    sp = sub.add_parser("decode-sim", parents=[common], help="token-by-token decode trace")
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("inspect", parents=[common], help="summarize a tensor or checkpoint file")
    sp.add_argument("path")
    sp = sub.add_parser("dump-tensors", parents=[common], help="write a synthetic sequence (or re-dump a file)")
    sp.add_argument("path")
    sp.add_argument("--from", dest="source", help="re-dump the tensors of an existing file")
    sp.add_argument("--kind", default="clustered")
    sp.add_argument("--seq-len", type=int, default=256)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"blockgate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"blockgate: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFormatError, CheckpointError, ShapeError, ValueError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"blockgate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
