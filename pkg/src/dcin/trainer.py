"""Hardest-negative bidirectional triplet training with AdamW."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .corpus import Corpus
from .evaluate import retrieval_report
from .model import DCINModel, ModelConfig, build_model
from .numerics import Tensor

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    margin: float = 0.2
    lr: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    epochs: int = 25
    weight_decay: float = 1e-4
    seed: int = 0
    lam: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2 (hardest negatives need two items)")
        if self.margin <= 0 or self.lr <= 0 or self.eps <= 0:
            raise TrainingError("margin, lr and eps must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise TrainingError("lr_decay must lie in (0,1] with a positive period")
        if self.epochs < 0 or self.weight_decay < 0:
            raise TrainingError("epochs and weight_decay must be nonnegative")
        if not 0.0 <= self.lam <= 1.0:
            raise TrainingError(f"lambda must lie in [0,1], got {self.lam}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError("betas must lie in [0,1)")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "alpha" in d:
            d["margin"] = d.pop("alpha")
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


def hardest_negatives(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row and per column, index of the highest off-diagonal score (ties -> smallest index)."""
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1), masked.argmax(axis=0)


def triplet_loss(S: Tensor, alpha: float) -> Tensor:
    """Mean over i of [a - S_ii + S_i,t^]_+ + [a - S_ii + S_v^,i]_+."""
    if S.data.ndim != 2 or S.shape[0] != S.shape[1]:
        raise nx.DimensionError(f"score matrix must be square, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        raise TrainingError("triplet loss needs at least two pairs for negatives")
    idx = np.arange(B)
    t_hat, v_hat = hardest_negatives(S.data)
    pos = nx.take(S, (idx, idx))
    neg_t = nx.take(S, (idx, t_hat))
    neg_v = nx.take(S, (v_hat, idx))
    margin = Tensor(np.full(B, alpha))
    h1 = nx.relu(nx.add(nx.sub(margin, pos), neg_t))
    h2 = nx.relu(nx.add(nx.sub(margin, pos), neg_v))
    return nx.scale(nx.sum_all(nx.add(h1, h2)), 1.0 / B)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
                   config: TrainConfig, lr: float | None = None) -> None:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam step."""
    lr = config.lr if lr is None else lr
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nx.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise nx.NumericError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def train_step(model: DCINModel, records, config: TrainConfig, state: OptimizerState, lr: float) -> float:
    loss = triplet_loss(model.score(records), config.margin)
    names = list(model.params)
    grads = nx.backward(loss, [model.params[k] for k in names])
    optimizer_step(model.params, dict(zip(names, grads)), state, config, lr)
    return loss.item()


@dataclass
class TrainResult:
    model: DCINModel
    best: DCINModel
    metrics: list[dict]
    best_epoch: int


def train(train_corpus: Corpus, val_corpus: Corpus, config: TrainConfig,
          model_config: ModelConfig | None = None, model: DCINModel | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from a seeded initialization; keeps the best-validation-rSum copy.

    Epochs are 0-based; the learning rate is multiplied by ``lr_decay`` at
    every multiple of ``lr_decay_every``.
    """
    config.validate()
    if len(train_corpus) < 2:
        raise TrainingError("training split needs at least two records")
    if len(val_corpus) == 0:
        raise TrainingError("validation split is empty")
    if model is None:
        model = build_model(train_corpus, model_config or ModelConfig(), config.lam, config.seed)
    model.lam = config.lam
    state = OptimizerState()
    best, best_rsum, best_epoch = model.copy(), -np.inf, -1
    metrics = []
    recs = train_corpus.records
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        rng = nx.rng_for(config.seed, "shuffle", epoch)
        losses = [train_step(model, [recs[i] for i in b], config, state, lr)
                  for b in batches(len(recs), config.batch_size, rng)]
        val = retrieval_report(model.score_matrix(val_corpus))
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_rsum": val.rsum, "lr": lr}
        metrics.append(row)
        log.info("epoch %d loss %.5f val rsum %.2f lr %.2e", epoch + 1, row["loss"], val.rsum, lr)
        if on_epoch:
            on_epoch(row)
        if val.rsum > best_rsum:
            best, best_rsum, best_epoch = model.copy(), val.rsum, epoch + 1
    return TrainResult(model, best, metrics, best_epoch)


def write_metrics(metrics: list[dict], path):
    with open(path, "w") as fh:
        for row in metrics:
            fh.write(json.dumps(row) + "\n")


def load_config(path) -> dict:
    return json.loads(Path(path).read_text())


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
