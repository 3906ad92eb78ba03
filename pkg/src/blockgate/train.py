"""Self-distillation of the gate against frozen reference attention."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionInputs, GroundTruthMap, ground_truth_fused
from .corpus import CorpusSpec, build_corpus
from .errors import NumericError
from .gate import GateParams, gate_backward, init_gate_params
from .tensor import ModelShape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 800
    batch: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")


def cosine_lr(step: int, base_lr: float, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 to exactly 0 at ``total_steps``."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay, state kept per named array."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1 = np.float32(beta1)
        self.beta2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.weight_decay = np.float32(weight_decay)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        lr = np.float32(lr)
        bc1 = np.float32(1.0 - float(self.beta1) ** self.t)
        bc2 = np.float32(1.0 - float(self.beta2) ** self.t)
        for name in sorted(params):
            p, g = params[name], grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p *= np.float32(1) - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    params: GateParams
    history: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [loss for _, _, loss in self.history]


def prepare_targets(corpus: Sequence[AttentionInputs], shape: ModelShape) -> List[GroundTruthMap]:
    """Ground truth for every sequence, produced once: the model is frozen."""
    return [ground_truth_fused(inp, shape)[1] for inp in corpus]


def batch_schedule(n_items: int, batch: int, steps: int, seed: int) -> List[np.ndarray]:
    """Sequence indices per step: shuffled epochs consumed in order."""
    rng = np.random.default_rng([seed, 7])
    order: List[int] = []
    out = []
    for _ in range(steps):
        while len(order) < batch:
            order.extend(rng.permutation(n_items).tolist())
        out.append(np.array(order[:batch]))
        order = order[batch:]
    return out


def train(
    config: TrainConfig,
    corpus: CorpusSpec | Sequence[AttentionInputs],
    shape: Optional[ModelShape] = None,
    params: Optional[GateParams] = None,
    targets: Optional[Sequence[GroundTruthMap]] = None,
    on_step: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Train gate weights only; returns final params and (step, lr, loss) rows.

    The loss of a step is the mean over the batch's sequences of each
    sequence's mean-over-rows KL; gradients are reduced in batch order.
    """
    if isinstance(corpus, CorpusSpec):
        shape = corpus.shape
        items = build_corpus(corpus)
    else:
        items = list(corpus)
        if shape is None:
            raise ValueError("shape is required when passing prepared inputs")
    targets = list(targets) if targets is not None else prepare_targets(items, shape)
    params = params.copy() if params is not None else init_gate_params(shape, config.seed)
    opt = AdamW(config.beta1, config.beta2, config.eps, config.weight_decay)
    result = TrainResult(params)
    for step, idx in enumerate(batch_schedule(len(items), config.batch, config.steps, config.seed)):
        lr = cosine_lr(step, config.lr, config.steps)
        gw_q = np.zeros_like(params.w_q)
        gw_k = np.zeros_like(params.w_k)
        total = 0.0
        for i in idx:
            try:
                loss, grads = gate_backward(items[i], params, shape, targets[i])
            except NumericError as exc:
                raise NumericError(f"step {step}, sequence {int(i)}: {exc}") from exc
            gw_q += grads.w_q
            gw_k += grads.w_k
            total += loss
        loss = total / len(idx)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        scale = np.float32(1.0 / len(idx))
        opt.step(params.arrays(), {"w_q": gw_q * scale, "w_k": gw_k * scale}, lr)
        result.history.append((step, lr, loss))
        if on_step is not None:
            on_step(step, lr, loss)
        if step % 100 == 0:
            log.debug("step %d lr %.3g loss %.6f", step, lr, loss)
    return result


def write_loss_csv(path: str | os.PathLike, history: Sequence[Tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            w.writerow([step, repr(float(lr)), repr(float(loss))])
