"""Prediction sources for pseudo-labeling and prompt assembly for a remote LLM.

Every oracle exposes ``num_classes``, ``predict(dialogue)`` and
``predict_many(dialogues)``, returning distributions over the K classes.
"""

from __future__ import annotations

import json
import re
import socket
import threading
import urllib.error
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dialogue
from .graph import GraphConfig
from .model import ModelConfig, ModelParams, build_graphs, forward_batch, pack_batch
from .trainer import predict_proba

GRAPH_MARKER = "<graph>"
AUDIO_MARKER = "<audio>"
RENORMALIZE_TOL = 1e-3


class PromptError(ValueError):
    pass


class BackboneError(RuntimeError):
    kind = "backbone"


class RemoteTimeout(BackboneError):
    kind = "timeout"


class MalformedResponse(BackboneError):
    kind = "malformed_response"


class InvalidDistribution(BackboneError):
    kind = "invalid_distribution"


class TransportError(BackboneError):
    kind = "transport"


@dataclass(frozen=True)
class PromptInput:
    instruction_text: str
    graph_feature: np.ndarray
    audio_feature: np.ndarray
    # text segments and the markers GRAPH_MARKER / AUDIO_MARKER, in order
    layout: tuple[str, ...]

    def render(self) -> str:
        return "".join(self.layout)

    def to_wire(self, num_classes: int) -> dict:
        return {
            "instruction": self.instruction_text,
            "graph_feature": [float(x) for x in self.graph_feature],
            "audio_feature": [float(x) for x in self.audio_feature],
            "num_classes": int(num_classes),
        }


def assemble_prompt(template: str, graph_feature, audio_feature) -> PromptInput:
    for marker in (GRAPH_MARKER, AUDIO_MARKER):
        n = template.count(marker)
        if n != 1:
            raise PromptError(f"template must contain {marker} exactly once (found {n})")
    g = np.asarray(graph_feature, dtype=np.float64)
    a = np.asarray(audio_feature, dtype=np.float64)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
        raise PromptError("feature slots must be finite")
    parts = re.split(f"({re.escape(GRAPH_MARKER)}|{re.escape(AUDIO_MARKER)})", template)
    layout = tuple(p for p in parts if p)
    return PromptInput(template, g, a, layout)


class MrdanOracle:
    """Eval-mode MR-DAN classifier as a prediction source (self-training)."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, graph_cfg: GraphConfig, theta=None, batch_size=64):
        self.params, self.cfg, self.graph_cfg = params, cfg, graph_cfg
        self.theta, self.batch_size = theta, batch_size

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def predict(self, dialogue: Dialogue) -> np.ndarray:
        return self.predict_many([dialogue])[0]

    def predict_many(self, dialogues: Sequence[Dialogue]) -> np.ndarray:
        return predict_proba(dialogues, self.params, self.cfg, self.graph_cfg, self.theta, self.batch_size)

    def embed(self, dialogues: Sequence[Dialogue]) -> np.ndarray:
        """Pooled graph representations ``(N, d_model)``."""
        graphs = build_graphs(dialogues, self.params, self.cfg, self.graph_cfg, self.theta)
        _, cache = forward_batch(pack_batch(dialogues, graphs), self.params, self.cfg)
        return cache["g"]


@dataclass(frozen=True)
class SyntheticOracleSpec:
    confusion: np.ndarray  # (K, K) row-stochastic, rows indexed by true class
    confidence_concentration: float = 4.0
    seed: int = 0

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.float64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError("confusion must be a square matrix")
        if np.any(conf < 0) or np.any(np.abs(conf.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must be probability distributions")
        if not self.confidence_concentration > 0 or np.isnan(self.confidence_concentration):
            raise ValueError("confidence_concentration must be > 0")


class SyntheticOracle:
    """Seeded noisy predictor driven by a confusion matrix over known truth.

    For a dialogue of true class ``c`` the predicted class is drawn from
    ``confusion[c]``; a Dirichlet(1) background is rearranged so its largest
    entry sits on that class, then mixed with a point mass of weight
    ``concentration``. The argmax is therefore always the drawn class.
    """

    def __init__(self, spec: SyntheticOracleSpec, truth: dict[str, int]):
        self.spec = spec
        self.confusion = np.asarray(spec.confusion, dtype=np.float64)
        self.truth = truth

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def predict(self, dialogue: Dialogue) -> np.ndarray:
        label = dialogue.label if dialogue.label is not None else self.truth.get(dialogue.id)
        if label is None:
            raise BackboneError(f"synthetic oracle has no truth for {dialogue.id!r}")
        rng = np.random.default_rng([self.spec.seed, zlib.crc32(dialogue.id.encode("utf-8"))])
        k = self.num_classes
        pred = int(rng.choice(k, p=self.confusion[label - 1]))
        conc = self.spec.confidence_concentration
        if np.isinf(conc):
            return np.eye(k)[pred]
        base = rng.dirichlet(np.ones(k))
        top = int(np.argmax(base))
        base[[pred, top]] = base[[top, pred]]
        q = base.copy()
        q[pred] += conc
        return q / q.sum()

    def predict_many(self, dialogues: Sequence[Dialogue]) -> np.ndarray:
        return np.stack([self.predict(d) for d in dialogues])


def parse_probs(payload, num_classes: int) -> np.ndarray:
    """Validate a ``{"probs": [...]}`` response body."""
    if not isinstance(payload, dict) or not isinstance(payload.get("probs"), list):
        raise MalformedResponse("response must be a JSON object with a 'probs' array")
    raw = payload["probs"]
    if len(raw) != num_classes:
        raise MalformedResponse(f"expected {num_classes} probabilities, got {len(raw)}")
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw):
        raise MalformedResponse("probabilities must be numbers")
    q = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(q)) or np.any(q < 0):
        raise InvalidDistribution("probabilities must be finite and non-negative")
    total = q.sum()
    if abs(total - 1.0) > RENORMALIZE_TOL:
        raise InvalidDistribution(f"probabilities sum to {total:.6g}, outside tolerance {RENORMALIZE_TOL}")
    return q / total


def remote_predict(
    endpoint: str,
    prompt: PromptInput,
    num_classes: int,
    timeout: float = 10.0,
    token: str | None = None,
) -> np.ndarray:
    body = json.dumps(prompt.to_wire(num_classes)).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(endpoint, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except (socket.timeout, TimeoutError) as exc:
        raise RemoteTimeout(f"no response from {endpoint} within {timeout}s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise RemoteTimeout(f"no response from {endpoint} within {timeout}s") from exc
        raise TransportError(f"request to {endpoint} failed: {exc}") from exc
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedResponse("response body is not valid JSON") from exc
    return parse_probs(payload, num_classes)


class RemoteOracle:
    """Sends assembled prompts to an external service.

    The graph slot is filled from ``graph_source`` (an :class:`MrdanOracle`)
    and the audio slot with the dialogue-level feature.
    """

    def __init__(
        self,
        endpoint: str,
        template: str,
        graph_source: MrdanOracle,
        timeout_ms: int = 10000,
        token: str | None = None,
        max_in_flight: int = 4,
    ):
        assemble_prompt(template, [0.0], [0.0])
        self.endpoint, self.template, self.graph_source = endpoint, template, graph_source
        self.timeout = timeout_ms / 1000.0
        self.token = token
        self.max_in_flight = max(1, max_in_flight)
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    @property
    def num_classes(self) -> int:
        return self.graph_source.num_classes

    def _call(self, dialogue: Dialogue, g: np.ndarray) -> np.ndarray:
        prompt = assemble_prompt(self.template, g, dialogue.dialogue_feature)
        with self._slots:
            return remote_predict(self.endpoint, prompt, self.num_classes, self.timeout, self.token)

    def predict(self, dialogue: Dialogue) -> np.ndarray:
        return self._call(dialogue, self.graph_source.embed([dialogue])[0])

    def predict_many(self, dialogues: Sequence[Dialogue]) -> np.ndarray:
        gs = self.graph_source.embed(dialogues)
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            results = list(pool.map(self._call, dialogues, gs))
        return np.stack(results)
