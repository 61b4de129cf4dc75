"""Supervised training: loss, AdamW, warmup-cosine schedule, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import CorpusPools, Dialogue
from .graph import DialogueGraph, GraphConfig, assign_speaker_indices, pairwise_similarities, update_theta
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    build_graphs,
    forward_batch,
    init_node_features,
    pack_batch,
)

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    warmup_fraction: float = 0.10
    seed: int = 0
    pseudo_label_weight: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise TrainingError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")


def cross_entropy(probs, label: int) -> float:
    """Negative log-likelihood of a 1-based ``label``, with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 1 <= label <= probs.shape[-1]:
        raise TrainingError(f"label {label} out of range 1..{probs.shape[-1]}")
    return float(-math.log(max(float(probs[label - 1]), PROB_FLOOR)))


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    warmup = math.ceil(warmup_fraction * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    if total_steps <= warmup:
        return base_lr
    progress = min((step - warmup) / (total_steps - warmup), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            params[name] = p - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
        return params


@dataclass
class Metrics:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro_f1: float
    weighted_f1: float
    confusion: list[list[int]]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "confusion": self.confusion,
        }


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> Metrics:
    """Metrics from 1-based labels; ``confusion[true][pred]``."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[t - 1, p - 1] += 1
    total = conf.sum()
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0)
    true_tot = conf.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros(num_classes), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros(num_classes), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    weights = true_tot / total if total else np.zeros(num_classes)
    return Metrics(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        f1=[float(x) for x in f1],
        support=[int(x) for x in true_tot],
        macro_f1=float(f1.mean()),
        weighted_f1=float((weights * f1).sum()),
        confusion=conf.tolist(),
    )


def predict_proba(
    dialogues: Sequence[Dialogue],
    params: ModelParams,
    cfg: ModelConfig,
    graph_cfg: GraphConfig,
    theta: float | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode class distributions ``(N, K)`` in input order."""
    out = np.zeros((len(dialogues), cfg.num_classes))
    for start in range(0, len(dialogues), batch_size):
        chunk = dialogues[start : start + batch_size]
        graphs = build_graphs(chunk, params, cfg, graph_cfg, theta)
        probs, _ = forward_batch(pack_batch(chunk, graphs), params, cfg, train=False)
        out[start : start + len(chunk)] = probs
    return out


def evaluate(
    dialogues: Sequence[Dialogue],
    params: ModelParams,
    cfg: ModelConfig,
    graph_cfg: GraphConfig,
    truth: dict[str, int] | None = None,
    theta: float | None = None,
) -> Metrics:
    """Metrics against dialogue labels, or ``truth`` for unlabeled dialogues."""
    truth = truth or {}
    y_true = []
    for d in dialogues:
        label = d.label if d.label is not None else truth.get(d.id)
        if label is None:
            raise TrainingError(f"no ground-truth label for dialogue {d.id!r}")
        y_true.append(label)
    probs = predict_proba(dialogues, params, cfg, graph_cfg, theta)
    y_pred = (probs.argmax(axis=1) + 1).tolist()
    return compute_metrics(y_true, y_pred, cfg.num_classes)


@dataclass
class EpochResult:
    epoch: int
    loss: float
    lr_trace: list[float] = field(default_factory=list)

    @property
    def lr_last(self) -> float:
        return self.lr_trace[-1] if self.lr_trace else 0.0


class Trainer:
    """Stateful training loop over the labeled pool.

    The learning-rate horizon is fixed when the trainer is created:
    ``steps_per_epoch`` comes from the initial labeled pool size, and when
    the pool grows later each epoch's batches are mapped proportionally onto
    that epoch's schedule slots.
    """

    def __init__(
        self,
        params: ModelParams,
        model_cfg: ModelConfig,
        graph_cfg: GraphConfig,
        train_cfg: TrainConfig,
        num_labeled: int,
    ):
        if num_labeled < 1:
            raise TrainingError("labeled pool is empty")
        self.params = params
        self.model_cfg = model_cfg
        self.graph_cfg = graph_cfg
        self.cfg = train_cfg
        self.opt = AdamW(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.weight_decay)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.theta = graph_cfg.similarity_threshold
        self.steps_per_epoch = math.ceil(num_labeled / train_cfg.batch_size)
        self.total_steps = self.steps_per_epoch * train_cfg.epochs
        self.epoch = 0
        self._graphs: dict[str, DialogueGraph] = {}

    def lr_at(self, epoch: int, batch_idx: int, num_batches: int) -> float:
        step = epoch * self.steps_per_epoch + (batch_idx * self.steps_per_epoch) // num_batches
        return cosine_warmup_lr(step, self.total_steps, self.cfg.base_lr, self.cfg.warmup_fraction)

    def _refresh_graphs(self, dialogues: Sequence[Dialogue]) -> None:
        rebuild = self.epoch == 0 or self.graph_cfg.rebuild_cross_edges_each_epoch
        if rebuild and self.graph_cfg.theta_mode != "fixed":
            sims = [
                pairwise_similarities(init_node_features(d, _speaker_idx(d, self.model_cfg), self.params))
                for d in dialogues
            ]
            self.theta = update_theta(self.graph_cfg, self.theta, np.concatenate(sims) if sims else [])
        todo = list(dialogues) if rebuild else [d for d in dialogues if d.id not in self._graphs]
        for d, g in zip(todo, build_graphs(todo, self.params, self.model_cfg, self.graph_cfg, self.theta)):
            self._graphs[d.id] = g

    def train_epoch(self, pools: CorpusPools) -> EpochResult:
        data = list(pools.labeled)
        if not data:
            raise TrainingError("labeled pool is empty")
        self._refresh_graphs(data)
        order = self.rng.permutation(len(data))
        bs = self.cfg.batch_size
        num_batches = math.ceil(len(data) / bs)
        total_loss, lr_trace = 0.0, []
        k = self.model_cfg.num_classes
        for bi in range(num_batches):
            chunk = [data[i] for i in order[bi * bs : (bi + 1) * bs]]
            batch = pack_batch(chunk, [self._graphs[d.id] for d in chunk])
            probs, cache = forward_batch(batch, self.params, self.model_cfg, train=True, rng=self.rng)
            labels = np.array([d.label - 1 for d in chunk])
            weights = np.array(
                [self.cfg.pseudo_label_weight if d.id in pools.pseudo_ids else 1.0 for d in chunk]
            )
            picked = probs[np.arange(len(chunk)), labels]
            losses = -np.log(np.maximum(picked, PROB_FLOOR))
            total_loss += float((weights * losses).sum())
            onehot = np.eye(k)[labels]
            active = (picked >= PROB_FLOOR)[:, None]
            dlogits = (probs - onehot) * active * weights[:, None] / len(chunk)
            grads = backward(cache, dlogits=dlogits)
            lr = self.lr_at(self.epoch, bi, num_batches)
            self.opt.step(self.params, grads, lr)
            lr_trace.append(lr)
        self.epoch += 1
        return EpochResult(self.epoch, total_loss / len(data), lr_trace)


def _speaker_idx(d: Dialogue, cfg: ModelConfig) -> list[int]:
    return assign_speaker_indices(d, cfg.num_speakers)


def train_supervised(
    pools: CorpusPools,
    params: ModelParams,
    model_cfg: ModelConfig,
    graph_cfg: GraphConfig,
    train_cfg: TrainConfig,
    on_epoch: Callable[[Trainer, EpochResult], None] | None = None,
) -> Trainer:
    trainer = Trainer(params, model_cfg, graph_cfg, train_cfg, len(pools.labeled))
    for _ in range(train_cfg.epochs):
        res = trainer.train_epoch(pools)
        if on_epoch is not None:
            on_epoch(trainer, res)
    return trainer
