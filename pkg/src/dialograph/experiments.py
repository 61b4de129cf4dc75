"""Experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .corpus import CorpusPools, Dialogue
from .backbone import MrdanOracle
from .graph import GraphConfig
from .model import ModelConfig, ModelParams, init_params
from .ssl import RoundReport, SslConfig, initial_state, ssl_round
from .trainer import EpochResult, Metrics, TrainConfig, Trainer, evaluate

SWEEP_PARAMS = ("speaker_window", "similarity_threshold", "num_heads")
DEFAULT_SWEEPS = {
    "speaker_window": [2, 3, 4, 5],
    "similarity_threshold": [0.6, 0.7, 0.8, 0.9],
    "num_heads": [4, 8, 12, 16],
}


@dataclass
class EvalSet:
    dialogues: Sequence[Dialogue]
    truth: dict[str, int] = field(default_factory=dict)
    name: str = "eval"


@dataclass
class RunResult:
    params: ModelParams
    theta: float
    metrics: Metrics | None
    epochs: list[dict] = field(default_factory=list)
    rounds: list[RoundReport] = field(default_factory=list)
    pools: CorpusPools | None = None


def _epoch_record(res: EpochResult, metrics: Metrics | None) -> dict:
    return {
        "epoch": res.epoch,
        "loss": res.loss,
        "lr_last": res.lr_last,
        "metrics": metrics.to_json() if metrics is not None else {},
    }


def run_ssl(
    pools: CorpusPools,
    model_cfg: ModelConfig,
    graph_cfg: GraphConfig,
    train_cfg: TrainConfig,
    ssl_cfg: SslConfig | None = None,
    *,
    init_seed: int = 0,
    truth: dict[str, int] | None = None,
    eval_set: EvalSet | None = None,
    log_metrics_each_epoch: bool = False,
    oracle_factory: Callable[[Trainer], object] | None = None,
    on_record: Callable[[str, dict], None] | None = None,
) -> RunResult:
    """Train on the labeled pool, pseudo-labeling every ``round_period`` epochs.

    With ``ssl_cfg=None`` this is plain supervised training.
    """
    params = init_params(model_cfg, init_seed)
    trainer = Trainer(params, model_cfg, graph_cfg, train_cfg, len(pools.labeled))
    state = initial_state(ssl_cfg, pools.num_classes, pools.labeled) if ssl_cfg else None
    epochs, rounds = [], []

    def metrics_now():
        if eval_set is None:
            return None
        return evaluate(eval_set.dialogues, trainer.params, model_cfg, graph_cfg, eval_set.truth, trainer.theta)

    for epoch in range(1, train_cfg.epochs + 1):
        res = trainer.train_epoch(pools)
        rec = _epoch_record(res, metrics_now() if log_metrics_each_epoch else None)
        epochs.append(rec)
        if on_record:
            on_record("epoch", rec)
        if ssl_cfg is not None and epoch % ssl_cfg.round_period == 0:
            if oracle_factory is not None:
                oracle = oracle_factory(trainer)
            else:
                oracle = MrdanOracle(trainer.params, model_cfg, graph_cfg, trainer.theta)
            pools, state, report = ssl_round(pools, oracle, state, ssl_cfg, truth)
            rounds.append(report)
            if on_record:
                on_record("round", report.to_json())
    return RunResult(trainer.params, trainer.theta, metrics_now(), epochs, rounds, pools)


def run_supervised(pools, model_cfg, graph_cfg, train_cfg, **kwargs) -> RunResult:
    return run_ssl(pools, model_cfg, graph_cfg, train_cfg, None, **kwargs)


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    repetitions: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMS:
            raise ValueError(f"cannot sweep {self.parameter!r}; choose from {', '.join(SWEEP_PARAMS)}")
        for v in self.values:
            if self.parameter == "num_heads" and (int(v) != v or int(v) < 4 or int(v) % 4):
                raise ValueError(f"num_heads value {v} is not a positive multiple of 4")
            if self.parameter == "speaker_window" and (int(v) != v or int(v) < 1):
                raise ValueError(f"speaker_window value {v} must be a positive integer")
            if self.parameter == "similarity_threshold" and not -1.0 < float(v) < 1.0:
                raise ValueError(f"similarity_threshold value {v} must lie in (-1, 1)")


def sweep_configs(spec: SweepSpec, model_cfg: ModelConfig, graph_cfg: GraphConfig, value):
    if spec.parameter == "num_heads":
        h = int(value)
        d = model_cfg.d_model
        if d % h:
            d = h * max(1, round(d / h))
        return dataclasses.replace(model_cfg, num_heads=h, d_model=d), graph_cfg
    if spec.parameter == "speaker_window":
        return model_cfg, dataclasses.replace(graph_cfg, speaker_window=int(value))
    return model_cfg, dataclasses.replace(graph_cfg, similarity_threshold=float(value))


def run_sweep(
    spec: SweepSpec,
    pools: CorpusPools,
    model_cfg: ModelConfig,
    graph_cfg: GraphConfig,
    train_cfg: TrainConfig,
    eval_set: EvalSet,
    ssl_cfg: SslConfig | None = None,
    truth: dict[str, int] | None = None,
) -> list[dict]:
    """One row per (value, seed): accuracy, macro-F1 and weighted-F1 on ``eval_set``."""
    rows = []
    for value in spec.values:
        mcfg, gcfg = sweep_configs(spec, model_cfg, graph_cfg, value)
        for seed in spec.repetitions:
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            res = run_ssl(pools, mcfg, gcfg, tcfg, ssl_cfg, init_seed=seed, truth=truth, eval_set=eval_set)
            rows.append(
                {
                    "parameter": spec.parameter,
                    "value": value,
                    "seed": seed,
                    "accuracy": res.metrics.accuracy,
                    "macro_f1": res.metrics.macro_f1,
                    "weighted_f1": res.metrics.weighted_f1,
                }
            )
    return rows
