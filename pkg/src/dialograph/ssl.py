"""Adaptive pseudo-labeling: EMA confidence thresholds, margin filter, balanced top-K.

Class indices in pseudo labels are 1-based; probability vectors are
0-indexed arrays of length K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import CorpusPools, Dialogue, promote

DIST_TOL = 1e-6


class SslError(ValueError):
    pass


@dataclass(frozen=True)
class SslConfig:
    ema_decay: float = 0.95
    initial_tau: float = 0.9
    margin_epsilon: float = 0.06
    delta: float = 1e-4
    top_percent: float = 0.10
    min_count: int = 1
    round_period: int = 5
    threshold_mode: str = "class_specific"  # or "global_only"
    batch_size: int = 64
    class_dist_init: str = "uniform"  # or "labeled"
    rescore_pseudo: bool = False

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise SslError("ema_decay must lie in (0, 1)")
        if self.margin_epsilon <= 0.0:
            raise SslError("margin_epsilon must be > 0")
        if not 0.0 < self.delta < 0.5:
            raise SslError("delta must lie in (0, 0.5)")
        if not 0.0 < self.top_percent <= 1.0:
            raise SslError("top_percent must lie in (0, 1]")
        if self.min_count < 0 or self.round_period < 1 or self.batch_size < 1:
            raise SslError("min_count >= 0, round_period >= 1 and batch_size >= 1 required")
        if self.threshold_mode not in ("class_specific", "global_only"):
            raise SslError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.class_dist_init not in ("uniform", "labeled"):
            raise SslError(f"unknown class_dist_init {self.class_dist_init!r}")


@dataclass(frozen=True)
class SslState:
    tau: float
    class_dist: np.ndarray
    round: int = 0
    history: tuple[dict, ...] = field(default=())


@dataclass(frozen=True)
class PseudoLabel:
    dialogue_id: str
    label: int
    confidence: float
    margin: float


def initial_state(cfg: SslConfig, num_classes: int, labeled: Sequence[Dialogue] = ()) -> SslState:
    if cfg.class_dist_init == "labeled" and labeled:
        counts = np.bincount([d.label - 1 for d in labeled], minlength=num_classes).astype(np.float64)
        dist = counts / counts.sum()
    else:
        dist = np.full(num_classes, 1.0 / num_classes)
    tau = float(np.clip(cfg.initial_tau, cfg.delta, 1.0 - cfg.delta))
    return SslState(tau, dist)


def _check_distributions(probs: np.ndarray) -> None:
    if probs.ndim != 2:
        raise SslError("expected a (N, K) array of distributions")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > DIST_TOL):
        raise SslError("batch contains a row that is not a probability distribution")


def ema_update_tau(state: SslState, probs, ema_decay: float, delta: float) -> SslState:
    """Move tau toward the batch mean of the top-class probability."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.size == 0:
        return state
    target = float(probs.max(axis=1).mean())
    tau = ema_decay * state.tau + (1.0 - ema_decay) * target
    return replace(state, tau=float(min(max(tau, delta), 1.0 - delta)))


def ema_update_class_dist(state: SslState, probs, ema_decay: float) -> SslState:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.size == 0:
        return state
    _check_distributions(probs)
    dist = ema_decay * state.class_dist + (1.0 - ema_decay) * probs.mean(axis=0)
    assert abs(dist.sum() - 1.0) <= DIST_TOL or abs(state.class_dist.sum() - 1.0) > DIST_TOL
    return replace(state, class_dist=dist)


def class_thresholds(tau: float, class_dist, delta: float) -> np.ndarray:
    """Scale tau by each class's share relative to the most frequent class, then clamp."""
    dist = np.asarray(class_dist, dtype=np.float64)
    raw = tau * dist / (dist.max() + delta)
    return np.clip(raw, delta, 1.0 - delta)


def thresholds_for(state: SslState, cfg: SslConfig) -> np.ndarray:
    if cfg.threshold_mode == "global_only":
        return np.full(len(state.class_dist), state.tau)
    return class_thresholds(state.tau, state.class_dist, cfg.delta)


def delta_margin_filter(q, tau_c, epsilon: float) -> tuple[int, float] | None:
    """Pick the class with the largest positive margin over its threshold.

    Returns ``(class, margin)`` with a 1-based class, or ``None`` when no
    class clears its threshold or the best margin does not exceed
    ``epsilon``. Ties go to the smallest class index.
    """
    q = np.asarray(q, dtype=np.float64)
    margins = q - np.asarray(tau_c, dtype=np.float64)
    valid = q > tau_c
    if not valid.any():
        return None
    best = int(np.argmax(np.where(valid, margins, -np.inf)))
    if margins[best] > epsilon:
        return best + 1, float(margins[best])
    return None


def topk_count(group_size: int, top_percent: float, min_count: int) -> int:
    # the small epsilon guards against products like 0.1 * 30 landing just below an integer
    return max(math.floor(top_percent * group_size + 1e-9), min(min_count, group_size))


def class_balanced_topk(candidates: Sequence[PseudoLabel], top_percent: float, min_count: int) -> list[PseudoLabel]:
    """Per pseudo-class, keep the most confident ``k_c`` candidates (ties by id)."""
    groups: dict[int, list[PseudoLabel]] = {}
    for c in candidates:
        groups.setdefault(c.label, []).append(c)
    selected = []
    for label in sorted(groups):
        group = sorted(groups[label], key=lambda p: (-p.confidence, p.dialogue_id))
        selected.extend(group[: topk_count(len(group), top_percent, min_count)])
    return selected


@dataclass
class RoundReport:
    round: int
    tau: float
    class_dist: list[float]
    class_thresholds: list[float]
    candidates_per_class: list[int]
    promoted_per_class: list[int]
    purity_per_class: list[float | None] | None
    processed: int = 0
    mean_entropy: float | None = None
    oracle_errors: list[dict] = field(default_factory=list)
    promoted: list[PseudoLabel] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "tau": self.tau,
            "class_dist": self.class_dist,
            "class_thresholds": self.class_thresholds,
            "candidates_per_class": self.candidates_per_class,
            "promoted_per_class": self.promoted_per_class,
            "purity_per_class": self.purity_per_class,
            "processed": self.processed,
            "mean_entropy": self.mean_entropy,
            "oracle_errors": self.oracle_errors,
        }


def _predict_chunk(oracle, chunk: Sequence[Dialogue], errors: list[dict]):
    """Predictions for a chunk; failing dialogues are dropped and recorded."""
    try:
        probs = np.asarray(oracle.predict_many(chunk), dtype=np.float64)
        _check_distributions(probs)
        return list(chunk), probs
    except Exception:  # noqa: BLE001 - retry one by one to isolate the failure
        pass
    kept, rows = [], []
    for d in chunk:
        try:
            q = np.asarray(oracle.predict(d), dtype=np.float64)
            _check_distributions(q[None])
        except Exception as exc:  # noqa: BLE001
            errors.append({"id": d.id, "kind": getattr(exc, "kind", type(exc).__name__), "message": str(exc)})
            continue
        kept.append(d)
        rows.append(q)
    return kept, (np.stack(rows) if rows else np.zeros((0, 0)))


def ssl_round(
    pools: CorpusPools,
    oracle,
    state: SslState,
    cfg: SslConfig,
    truth: dict[str, int] | None = None,
) -> tuple[CorpusPools, SslState, RoundReport]:
    """One pseudo-labeling pass over the unlabeled pool.

    The oracle scores unlabeled dialogues in id order, chunk by chunk, and
    the EMA statistics are updated after every chunk. Thresholds are then
    derived from the final state, and the filtered, class-balanced
    selection is promoted into the labeled pool.
    """
    k = pools.num_classes
    if cfg.rescore_pseudo and pools.pseudo_ids:
        back = tuple(d.with_label(None) for d in pools.labeled if d.id in pools.pseudo_ids)
        keep = tuple(d for d in pools.labeled if d.id not in pools.pseudo_ids)
        pools = CorpusPools(keep, pools.unlabeled + back, k, pools.feature_dim)
    if not pools.unlabeled:
        zeros = [0] * k
        report = RoundReport(
            state.round + 1,
            state.tau,
            state.class_dist.tolist(),
            thresholds_for(state, cfg).tolist(),
            zeros,
            list(zeros),
            None if truth is None else [None] * k,
        )
        return pools, state, report

    unlabeled = sorted(pools.unlabeled, key=lambda d: d.id)
    errors: list[dict] = []
    scored: list[tuple[Dialogue, np.ndarray]] = []
    for start in range(0, len(unlabeled), cfg.batch_size):
        kept, probs = _predict_chunk(oracle, unlabeled[start : start + cfg.batch_size], errors)
        if not kept:
            continue
        state = ema_update_tau(state, probs, cfg.ema_decay, cfg.delta)
        state = ema_update_class_dist(state, probs, cfg.ema_decay)
        scored.extend(zip(kept, probs))

    tau_c = thresholds_for(state, cfg)
    candidates = []
    for d, q in scored:
        hit = delta_margin_filter(q, tau_c, cfg.margin_epsilon)
        if hit is not None:
            candidates.append(PseudoLabel(d.id, hit[0], float(q[hit[0] - 1]), hit[1]))
    selected = class_balanced_topk(candidates, cfg.top_percent, cfg.min_count)
    new_pools = promote(pools, [(p.dialogue_id, p.label) for p in selected])

    cand_counts = np.bincount([c.label - 1 for c in candidates], minlength=k).tolist()
    prom_counts = np.bincount([p.label - 1 for p in selected], minlength=k).tolist()
    purity = None
    if truth is not None:
        purity = []
        for c in range(1, k + 1):
            mine = [p for p in selected if p.label == c]
            purity.append(sum(truth.get(p.dialogue_id) == c for p in mine) / len(mine) if mine else None)
    entropy = None
    if scored:
        q = np.stack([s[1] for s in scored])
        entropy = float(-(q * np.log(np.maximum(q, 1e-300))).sum(axis=1).mean())
    state = replace(
        state,
        round=state.round + 1,
        history=state.history
        + ({"tau": state.tau, "class_dist": state.class_dist.tolist(), "promoted_per_class": prom_counts},),
    )
    report = RoundReport(
        state.round,
        state.tau,
        state.class_dist.tolist(),
        tau_c.tolist(),
        cand_counts,
        prom_counts,
        purity,
        processed=len(scored),
        mean_entropy=entropy,
        oracle_errors=errors,
        promoted=selected,
    )
    return new_pools, state, report
