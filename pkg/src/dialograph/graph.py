"""Typed dialogue graphs: temporal, speaker, cross-utterance and self-loop edges.

Node indices are 1-based in edge lists and in the JSON dump, matching
utterance positions. ``DialogueGraph.type_masks`` gives the 0-based dense
form used by the network, ``mask[t, i, j]`` meaning ``j`` is a type-``t``
neighbour of target ``i``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .corpus import Dialogue

ZERO_NORM = 1e-12


class GraphError(ValueError):
    pass


class EdgeType(enum.IntEnum):
    TEMPORAL = 0
    SPEAKER = 1
    CROSS_UTTERANCE = 2
    SELF_LOOP = 3


NUM_EDGE_TYPES = len(EdgeType)
DUMP_KEYS = {
    EdgeType.TEMPORAL: "temporal",
    EdgeType.SPEAKER: "speaker",
    EdgeType.CROSS_UTTERANCE: "cross",
    EdgeType.SELF_LOOP: "self",
}


@dataclass(frozen=True)
class GraphConfig:
    speaker_window: int = 3
    similarity_threshold: float = 0.8
    theta_mode: str = "fixed"  # "fixed" or "ema-quantile"
    theta_quantile: float = 0.9
    theta_decay: float = 0.95
    rebuild_cross_edges_each_epoch: bool = True

    def __post_init__(self):
        if self.speaker_window < 1:
            raise GraphError(f"speaker_window must be >= 1, got {self.speaker_window}")
        if not np.isfinite(self.similarity_threshold):
            raise GraphError("similarity_threshold must be finite")
        if self.theta_mode not in ("fixed", "ema-quantile"):
            raise GraphError(f"unknown theta_mode {self.theta_mode!r}")
        if not 0.0 <= self.theta_quantile <= 1.0:
            raise GraphError("theta_quantile must lie in [0, 1]")
        if not 0.0 <= self.theta_decay <= 1.0:
            raise GraphError("theta_decay must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class DialogueGraph:
    num_nodes: int
    edges: dict[EdgeType, tuple[tuple[int, int], ...]]
    speaker_index: tuple[int, ...]
    theta_used: float
    _masks: np.ndarray = field(repr=False, default=None)

    @cached_property
    def typed_neighbors(self) -> dict[tuple[int, EdgeType], tuple[int, ...]]:
        nbrs: dict[tuple[int, EdgeType], list[int]] = {
            (i, t): [] for i in range(1, self.num_nodes + 1) for t in EdgeType
        }
        for t, pairs in self.edges.items():
            for j, i in pairs:
                nbrs[(i, t)].append(j)
        return {k: tuple(sorted(v)) for k, v in nbrs.items()}

    def neighbors(self, i: int, t: EdgeType) -> tuple[int, ...]:
        return self.typed_neighbors[(i, EdgeType(t))]

    @property
    def type_masks(self) -> np.ndarray:
        """Boolean ``(4, M, M)`` array, ``[t, target, source]``, 0-based."""
        if self._masks is not None:
            return self._masks
        m = np.zeros((NUM_EDGE_TYPES, self.num_nodes, self.num_nodes), dtype=bool)
        for t, pairs in self.edges.items():
            for j, i in pairs:
                m[t, i - 1, j - 1] = True
        return m

    def to_json(self) -> dict:
        return {
            "M": self.num_nodes,
            "edges": {DUMP_KEYS[t]: [list(p) for p in self.edges[t]] for t in EdgeType},
            "theta_used": float(self.theta_used),
        }


def assign_speaker_indices(speakers: Dialogue | Sequence[str], table_size: int) -> list[int]:
    """Index speakers by order of first appearance."""
    if isinstance(speakers, Dialogue):
        speakers = speakers.speakers
    first_seen: dict[str, int] = {}
    out = []
    for s in speakers:
        if s not in first_seen:
            first_seen[s] = len(first_seen)
        out.append(first_seen[s])
    if len(first_seen) > table_size:
        raise GraphError(f"dialogue has {len(first_seen)} distinct speakers but the speaker table holds {table_size}")
    return out


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise GraphError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def similarity_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities with zero rows mapped to 0."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    ok = norms >= ZERO_NORM
    unit = np.zeros_like(x)
    unit[ok] = x[ok] / norms[ok, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def build_graph(
    speakers: Dialogue | Sequence[str],
    node_features: np.ndarray,
    cfg: GraphConfig,
    theta: float | None = None,
    speaker_table_size: int | None = None,
) -> DialogueGraph:
    """Construct the four typed edge sets for one dialogue.

    ``theta`` overrides ``cfg.similarity_threshold`` (used when the
    threshold is adapted during training).
    """
    if isinstance(speakers, Dialogue):
        speakers = speakers.speakers
    x = np.asarray(node_features, dtype=np.float64)
    m = len(speakers)
    if x.ndim != 2 or x.shape[0] != m:
        raise GraphError(f"node feature matrix has shape {x.shape}, expected ({m}, d)")
    theta = cfg.similarity_threshold if theta is None else float(theta)
    spk_idx = assign_speaker_indices(speakers, speaker_table_size or max(m, 1))

    temporal = tuple((i, i + 1) for i in range(1, m))
    speaker_edges = []
    last_seen: dict[int, list[int]] = {}
    for i in range(1, m + 1):
        prev = last_seen.setdefault(spk_idx[i - 1], [])
        speaker_edges.extend((j, i) for j in prev[-cfg.speaker_window:])
        prev.append(i)

    sim = similarity_matrix(x)
    above = np.tril(sim > theta, k=-1)  # [i, j] with j < i
    above[np.arange(1, m), np.arange(0, m - 1)] = True
    tgt, src = np.nonzero(above)
    order = np.lexsort((src, tgt))
    cross = tuple((int(src[k]) + 1, int(tgt[k]) + 1) for k in order)

    edges = {
        EdgeType.TEMPORAL: temporal,
        EdgeType.SPEAKER: tuple(speaker_edges),
        EdgeType.CROSS_UTTERANCE: cross,
        EdgeType.SELF_LOOP: tuple((i, i) for i in range(1, m + 1)),
    }
    masks = np.zeros((NUM_EDGE_TYPES, m, m), dtype=bool)
    for t, pairs in edges.items():
        if pairs:
            arr = np.asarray(pairs) - 1
            masks[t, arr[:, 1], arr[:, 0]] = True
    masks.setflags(write=False)
    return DialogueGraph(m, edges, tuple(spk_idx), theta, masks)


def pairwise_similarities(x: np.ndarray) -> np.ndarray:
    """Similarities of all ordered pairs ``j < i`` (the cross-edge candidates)."""
    sim = similarity_matrix(x)
    return sim[np.tril_indices(sim.shape[0], k=-1)]


def update_theta(cfg: GraphConfig, theta: float, observed_similarities) -> float:
    """EMA toward a quantile of observed similarities; no-op in fixed mode."""
    if cfg.theta_mode == "fixed":
        return theta
    obs = np.asarray(observed_similarities, dtype=np.float64).ravel()
    if obs.size == 0:
        return theta
    target = float(np.quantile(obs, cfg.theta_quantile))
    new = cfg.theta_decay * theta + (1.0 - cfg.theta_decay) * target
    return float(np.clip(new, np.nextafter(-1.0, 0.0), np.nextafter(1.0, 0.0)))
