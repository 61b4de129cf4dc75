"""Dialogue data model, JSONL corpus I/O, pool management and synthetic corpora.

Labels are 1-based intent indices everywhere outside the model internals.
Ground truth for withheld labels is kept in plain ``{id: label}`` dicts
(written as sidecar files), never inside :class:`CorpusPools`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: str
    feature: np.ndarray


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    dialogue_feature: np.ndarray
    label: int | None = None

    @property
    def num_utterances(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return [u.speaker for u in self.utterances]

    def feature_matrix(self) -> np.ndarray:
        """Utterance features stacked as an ``(M, d_h)`` float64 array."""
        return np.stack([u.feature for u in self.utterances]).astype(np.float64)

    def with_label(self, label: int | None) -> Dialogue:
        return replace(self, label=label)


@dataclass(frozen=True)
class CorpusPools:
    labeled: tuple[Dialogue, ...]
    unlabeled: tuple[Dialogue, ...]
    num_classes: int
    feature_dim: int
    # ids in ``labeled`` whose label came from pseudo-labeling
    pseudo_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.num_classes < 2:
            raise CorpusError(f"num_classes must be >= 2, got {self.num_classes}")
        lab_ids = [d.id for d in self.labeled]
        unl_ids = [d.id for d in self.unlabeled]
        if len(set(lab_ids)) != len(lab_ids) or len(set(unl_ids)) != len(unl_ids):
            raise CorpusError("duplicate dialogue id within a pool")
        overlap = set(lab_ids) & set(unl_ids)
        if overlap:
            raise CorpusError(f"pools overlap on ids: {sorted(overlap)[:5]}")
        for d in self.labeled:
            if d.label is None:
                raise CorpusError(f"labeled dialogue {d.id!r} has no label")
        if not self.pseudo_ids <= set(lab_ids):
            raise CorpusError("pseudo_ids must refer to labeled dialogues")

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.labeled), len(self.unlabeled)

    def all_dialogues(self) -> list[Dialogue]:
        return list(self.labeled) + list(self.unlabeled)


def _as_feature(values, dim: int, where: str) -> np.ndarray:
    if not isinstance(values, list):
        raise CorpusError(f"{where}: feature must be an array of numbers")
    if len(values) != dim:
        raise CorpusError(f"{where}: dimension mismatch, expected {dim} values, got {len(values)}")
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CorpusError(f"{where}: non-numeric feature value") from exc
    if not np.all(np.isfinite(arr)):
        raise CorpusError(f"{where}: non-finite feature value")
    # stored precision is single; keep values exactly representable in float32
    arr = arr.astype(np.float32)
    arr.setflags(write=False)
    return arr


def dialogue_from_record(rec: dict, d_h: int, num_classes: int, where: str = "record") -> Dialogue:
    if not isinstance(rec, dict):
        raise CorpusError(f"{where}: expected a JSON object")
    for key in ("id", "utterances", "dialogue_feature"):
        if key not in rec:
            raise CorpusError(f"{where}: missing field {key!r}")
    did = rec["id"]
    if not isinstance(did, str) or not did:
        raise CorpusError(f"{where}: field 'id' must be a non-empty string")
    where = f"{where} (id={did!r})"
    utts = rec["utterances"]
    if not isinstance(utts, list) or not utts:
        raise CorpusError(f"{where}: field 'utterances' must be a non-empty array")
    utterances = []
    for j, u in enumerate(utts, start=1):
        if not isinstance(u, dict) or "speaker" not in u or "feature" not in u:
            raise CorpusError(f"{where}: utterance {j} needs 'speaker' and 'feature'")
        if not isinstance(u["speaker"], str):
            raise CorpusError(f"{where}: utterance {j} field 'speaker' must be a string")
        feat = _as_feature(u["feature"], d_h, f"{where} utterance {j} field 'feature'")
        utterances.append(Utterance(j, u["speaker"], feat))
    gfeat = _as_feature(rec["dialogue_feature"], d_h, f"{where} field 'dialogue_feature'")
    label = rec.get("label")
    if label is not None:
        if not isinstance(label, int) or isinstance(label, bool):
            raise CorpusError(f"{where}: field 'label' must be an integer")
        if not 1 <= label <= num_classes:
            raise CorpusError(f"{where}: label {label} out of range 1..{num_classes}")
    return Dialogue(did, tuple(utterances), gfeat, label)


def dialogue_to_record(d: Dialogue, include_label: bool = True) -> dict:
    rec = {
        "id": d.id,
        "utterances": [{"speaker": u.speaker, "feature": [float(x) for x in u.feature]} for u in d.utterances],
        "dialogue_feature": [float(x) for x in d.dialogue_feature],
    }
    if include_label and d.label is not None:
        rec["label"] = int(d.label)
    return rec


def load_corpus(path: str | Path, declared_dims: tuple[int, int] | None = None) -> CorpusPools:
    """Read a JSONL corpus and partition it by presence of a label.

    The first line is the header ``{"d_h", "K", "version"}``. When
    ``declared_dims`` is given it must agree with the header.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc.strerror}") from exc
    if not lines:
        raise CorpusError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:1: malformed header: {exc.msg}") from exc
    if not isinstance(header, dict) or not {"d_h", "K", "version"} <= header.keys():
        raise CorpusError(f"{path}:1: header must declare d_h, K and version")
    if header["version"] != FORMAT_VERSION:
        raise CorpusError(f"{path}:1: unsupported version {header['version']}")
    d_h, num_classes = int(header["d_h"]), int(header["K"])
    if declared_dims is not None and tuple(declared_dims) != (d_h, num_classes):
        raise CorpusError(
            f"{path}: dimension mismatch, header declares (d_h={d_h}, K={num_classes}) "
            f"but (d_h={declared_dims[0]}, K={declared_dims[1]}) was expected"
        )
    labeled, unlabeled, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
        d = dialogue_from_record(rec, d_h, num_classes, where=f"{path}:{lineno}")
        if d.id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate dialogue id {d.id!r}")
        seen.add(d.id)
        (labeled if d.label is not None else unlabeled).append(d)
    return CorpusPools(tuple(labeled), tuple(unlabeled), num_classes, d_h)


def save_corpus(pools: CorpusPools, path: str | Path) -> None:
    """Write pools as JSONL; pseudo labels are written as labels."""
    header = {"d_h": pools.feature_dim, "K": pools.num_classes, "version": FORMAT_VERSION}
    lines = [json.dumps(header)]
    lines.extend(json.dumps(dialogue_to_record(d)) for d in pools.all_dialogues())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_sidecar(path: str | Path) -> dict[str, int]:
    truth = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            truth[str(rec["id"])] = int(rec["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed sidecar record") from exc
    return truth


def save_sidecar(truth: dict[str, int], path: str | Path) -> None:
    lines = [json.dumps({"id": k, "label": int(truth[k])}) for k in sorted(truth)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    feature_dim: int = 16
    # int for a balanced corpus, or one count per class
    dialogues_per_class: int | tuple[int, ...] = 50
    utterance_count_range: tuple[int, int] = (4, 10)
    speakers: int = 2
    class_separation: float = 3.0
    noise_std: float = 1.0
    unlabeled_fraction: float = 0.0
    seed: int = 0

    def class_counts(self) -> list[int]:
        if isinstance(self.dialogues_per_class, int):
            return [self.dialogues_per_class] * self.num_classes
        counts = list(self.dialogues_per_class)
        if len(counts) != self.num_classes:
            raise CorpusError("dialogues_per_class needs one entry per class")
        return counts

    def validate(self) -> None:
        lo, hi = self.utterance_count_range
        if not 1 <= lo <= hi:
            raise CorpusError(f"invalid utterance_count_range {self.utterance_count_range}")
        if self.num_classes < 2 or self.feature_dim < 1 or self.speakers < 1:
            raise CorpusError("num_classes >= 2, feature_dim >= 1 and speakers >= 1 required")
        if not (math.isfinite(self.class_separation) and self.class_separation >= 0):
            raise CorpusError("class_separation must be finite and >= 0")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise CorpusError("noise_std must be finite and >= 0")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise CorpusError("unlabeled_fraction must lie in [0, 1)")
        if any(c < 0 for c in self.class_counts()):
            raise CorpusError("negative class count")


def class_centroids(num_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Centroids with pairwise distance ``separation`` (exact when K <= dim)."""
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        basis, _ = np.linalg.qr(raw)
        dirs = basis.T
    else:
        dirs = (raw / np.linalg.norm(raw, axis=0)).T
    return dirs * (separation / math.sqrt(2.0))


def _make_dialogue(did: str, feats: np.ndarray, speakers: Sequence[str], label: int | None) -> Dialogue:
    feats = feats.astype(np.float32)
    feats.setflags(write=False)
    utts = tuple(Utterance(j + 1, speakers[j], feats[j]) for j in range(len(speakers)))
    g = feats.astype(np.float64).mean(axis=0).astype(np.float32)
    g.setflags(write=False)
    return Dialogue(did, utts, g, label)


def _withhold(dialogues: list[Dialogue], fraction: float, rng: np.random.Generator):
    """Stratified withholding of labels; returns (labeled, unlabeled, truth)."""
    if fraction <= 0:
        return dialogues, [], {}
    labels = sorted({d.label for d in dialogues})
    by_class = {c: [d for d in dialogues if d.label == c] for c in labels}
    keep_counts = _stratified_counts({c: len(v) for c, v in by_class.items()}, 1.0 - fraction)
    labeled, unlabeled, truth = [], [], {}
    for c in labels:
        group = by_class[c]
        order = rng.permutation(len(group))
        keep = set(order[: keep_counts[c]].tolist())
        for i, d in enumerate(group):
            if i in keep:
                labeled.append(d)
            else:
                truth[d.id] = d.label
                unlabeled.append(d.with_label(None))
    return labeled, unlabeled, truth


def _stratified_counts(sizes: dict[int, int], fraction: float) -> dict[int, int]:
    """Per-stratum counts totalling round(fraction * N) by largest remainder."""
    total = sum(sizes.values())
    target = int(math.floor(fraction * total + 0.5))
    exact = {c: fraction * n for c, n in sizes.items()}
    counts = {c: int(math.floor(v + 1e-9)) for c, v in exact.items()}
    remaining = target - sum(counts.values())
    order = sorted(sizes, key=lambda c: (-(exact[c] - counts[c]), c))
    for c in order:
        if remaining <= 0:
            break
        if counts[c] < sizes[c]:
            counts[c] += 1
            remaining -= 1
    return counts


def generate_synthetic(spec: SynthSpec) -> tuple[CorpusPools, dict[str, int]]:
    """Gaussian-cluster corpus; returns pools and the withheld ground truth.

    Every utterance feature is drawn around its dialogue's class centroid;
    speakers are drawn uniformly from ``spec.speakers`` roles.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centroids = class_centroids(spec.num_classes, spec.feature_dim, spec.class_separation, rng)
    lo, hi = spec.utterance_count_range
    dialogues = []
    for c, count in enumerate(spec.class_counts(), start=1):
        for n in range(count):
            m = int(rng.integers(lo, hi + 1))
            feats = centroids[c - 1] + spec.noise_std * rng.standard_normal((m, spec.feature_dim))
            spk = [f"S{int(s)}" for s in rng.integers(0, spec.speakers, size=m)]
            dialogues.append(_make_dialogue(f"c{c}-{n:05d}", feats, spk, c))
    labeled, unlabeled, truth = _withhold(dialogues, spec.unlabeled_fraction, rng)
    pools = CorpusPools(tuple(labeled), tuple(unlabeled), spec.num_classes, spec.feature_dim)
    return pools, truth


def generate_structural(
    dialogues_per_class: int = 100,
    feature_dim: int = 8,
    num_utterances: int = 8,
    noise_std: float = 0.3,
    seed: int = 0,
) -> CorpusPools:
    """Four-class corpus whose labels are invisible to mean pooling.

    Bit one of the label is the turn-taking pattern (strict alternation
    ABAB... versus paired turns AABB...), which leaves the speaker mix
    unchanged. Bit two flips the sign of the final utterance relative to a
    per-dialogue random topic direction. Both are recoverable only from
    relations between utterances.
    """
    rng = np.random.default_rng(seed)
    if num_utterances % 4:
        raise CorpusError("num_utterances must be a multiple of 4")
    dialogues = []
    for c in range(4):
        paired, flipped = divmod(c, 2)
        for n in range(dialogues_per_class):
            topic = rng.standard_normal(feature_dim)
            topic /= np.linalg.norm(topic)
            feats = topic + noise_std * rng.standard_normal((num_utterances, feature_dim))
            if flipped:
                feats[-1] = -topic + noise_std * rng.standard_normal(feature_dim)
            if paired:
                spk = ["A" if (j // 2) % 2 == 0 else "B" for j in range(num_utterances)]
            else:
                spk = ["A" if j % 2 == 0 else "B" for j in range(num_utterances)]
            dialogues.append(_make_dialogue(f"s{c + 1}-{n:05d}", feats, spk, c + 1))
    order = rng.permutation(len(dialogues))
    dialogues = [dialogues[i] for i in order]
    return CorpusPools(tuple(dialogues), (), 4, feature_dim)


def split_pools(pools: CorpusPools, labeled_fraction: float, seed: int) -> tuple[CorpusPools, dict[str, int]]:
    """Keep ``labeled_fraction`` of each class labeled; move the rest to the unlabeled pool.

    Returns the new pools and the ground truth of the moved dialogues.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise CorpusError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    if not pools.labeled:
        raise CorpusError("cannot split an empty labeled pool")
    if labeled_fraction == 1.0:
        return pools, {}
    rng = np.random.default_rng(seed)
    labeled, moved, truth = _withhold(list(pools.labeled), 1.0 - labeled_fraction, rng)
    pseudo = pools.pseudo_ids & {d.id for d in labeled}
    new = CorpusPools(tuple(labeled), tuple(moved) + pools.unlabeled, pools.num_classes, pools.feature_dim, pseudo)
    return new, truth


def promote(pools: CorpusPools, assignments: Iterable[tuple[str, int]]) -> CorpusPools:
    """Move unlabeled dialogues into the labeled pool under pseudo labels."""
    assign = dict(assignments)
    unl = {d.id: d for d in pools.unlabeled}
    missing = set(assign) - unl.keys()
    if missing:
        raise CorpusError(f"cannot promote ids not in the unlabeled pool: {sorted(missing)[:5]}")
    promoted = tuple(unl[i].with_label(assign[i]) for i in sorted(assign))
    remaining = tuple(d for d in pools.unlabeled if d.id not in assign)
    return CorpusPools(
        pools.labeled + promoted,
        remaining,
        pools.num_classes,
        pools.feature_dim,
        pools.pseudo_ids | frozenset(assign),
    )
