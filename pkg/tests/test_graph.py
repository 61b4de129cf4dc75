import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dialograph.graph import (
    EdgeType,
    GraphConfig,
    GraphError,
    assign_speaker_indices,
    build_graph,
    cosine_similarity,
    update_theta,
)
from oracles import brute_force_edges, cos_py

KEYS = {EdgeType.TEMPORAL: "temporal", EdgeType.SPEAKER: "speaker", EdgeType.CROSS_UTTERANCE: "cross", EdgeType.SELF_LOOP: "self"}


def edge_sets(graph):
    return {KEYS[t]: set(graph.edges[t]) for t in EdgeType}


def test_speaker_indices():
    assert assign_speaker_indices(list("ABAB"), 2) == [0, 1, 0, 1]
    assert assign_speaker_indices(["X"], 2) == [0]
    with pytest.raises(GraphError):
        assign_speaker_indices(list("ABC"), 2)


def test_cosine_examples():
    assert cosine_similarity((1, 0), (1, 0)) == 1.0
    assert cosine_similarity((1, 0), (0, 1)) == 0.0
    assert cosine_similarity((1, 1), (1, 0)) == pytest.approx(0.7071, abs=1e-4)
    assert cosine_similarity((0, 0), (1, 0)) == 0.0


def test_three_node_example():
    x = np.random.default_rng(0).normal(size=(3, 4))
    g = build_graph(list("ABA"), x, GraphConfig(speaker_window=3, similarity_threshold=0.99), theta=1.1)
    assert edge_sets(g) == {
        "temporal": {(1, 2), (2, 3)},
        "speaker": {(1, 3)},
        "cross": {(1, 2), (2, 3)},
        "self": {(1, 1), (2, 2), (3, 3)},
    }


def test_single_node_has_only_self_loop():
    g = build_graph(["A"], np.ones((1, 3)), GraphConfig())
    assert edge_sets(g) == {"temporal": set(), "speaker": set(), "cross": set(), "self": {(1, 1)}}


def test_speaker_window_keeps_most_recent():
    g = build_graph(list("AAAA"), np.eye(4), GraphConfig(speaker_window=2))
    assert set(g.edges[EdgeType.SPEAKER]) == {(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)}


def test_strict_threshold():
    # sim((1,0),(1,1)) is 1/sqrt(2); an edge (1,3) needs sim > theta
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    s = cosine_similarity(x[0], x[2])
    assert (1, 3) not in build_graph(list("ABC"), x, GraphConfig(), theta=s, speaker_table_size=3).edges[EdgeType.CROSS_UTTERANCE]
    assert (1, 3) in build_graph(list("ABC"), x, GraphConfig(), theta=s - 1e-9, speaker_table_size=3).edges[EdgeType.CROSS_UTTERANCE]


def test_json_shape_and_theta():
    g = build_graph(list("ABAB"), np.eye(4), GraphConfig(similarity_threshold=0.7))
    doc = json.loads(json.dumps(g.to_json()))
    assert set(doc) == {"M", "edges", "theta_used"}
    assert set(doc["edges"]) == {"temporal", "speaker", "cross", "self"}
    assert doc["theta_used"] == 0.7 and doc["M"] == 4


def test_type_masks_match_edges():
    rng = np.random.default_rng(1)
    g = build_graph(list("ABBA"), rng.normal(size=(4, 3)), GraphConfig(similarity_threshold=0.0))
    for t in EdgeType:
        pairs = {(j + 1, i + 1) for i, j in zip(*np.nonzero(g.type_masks[t]))}
        assert pairs == set(g.edges[t])


def test_update_theta_examples():
    cfg = GraphConfig(theta_mode="ema-quantile", theta_decay=0.95, theta_quantile=0.5)
    assert update_theta(cfg, 0.8, [0.6]) == pytest.approx(0.79, abs=1e-9)
    still = GraphConfig(theta_mode="ema-quantile", theta_decay=1.0)
    assert update_theta(still, 0.8, [0.1, 0.2]) == 0.8
    assert update_theta(GraphConfig(), 0.8, [0.1]) == 0.8


def test_config_validation():
    with pytest.raises(GraphError):
        GraphConfig(speaker_window=0)
    with pytest.raises(GraphError):
        GraphConfig(theta_mode="learned")


def _near_threshold(x, theta):
    m = len(x)
    return any(abs(cos_py(x[a], x[b]) - theta) < 1e-9 for a in range(m) for b in range(a))


@st.composite
def dialogues(draw):
    m = draw(st.integers(1, 10))
    n_spk = draw(st.integers(1, 3))
    speakers = draw(st.lists(st.integers(0, n_spk - 1), min_size=m, max_size=m))
    feats = draw(
        st.lists(st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3), min_size=m, max_size=m)
    )
    return [f"S{s}" for s in speakers], np.array(feats)


@settings(max_examples=200, deadline=None)
@given(dialogues(), st.integers(1, 4), st.floats(-0.9, 0.99))
def test_matches_quadratic_oracle(dlg, k, theta):
    speakers, x = dlg
    g = build_graph(speakers, x, GraphConfig(speaker_window=k), theta=theta, speaker_table_size=3)
    expected = brute_force_edges(speakers, x, k, theta)
    # near-threshold pairs can differ by rounding between numpy and math; skip those draws
    if _near_threshold(x, theta):
        return
    assert edge_sets(g) == expected


@settings(max_examples=100, deadline=None)
@given(dialogues(), st.integers(1, 4), st.floats(0.01, 100.0))
def test_structural_properties(dlg, k, scale):
    speakers, x = dlg
    cfg = GraphConfig(speaker_window=k)
    g = build_graph(speakers, x, cfg, speaker_table_size=3)
    m = len(speakers)
    for i in range(1, m + 1):
        assert g.neighbors(i, EdgeType.TEMPORAL) == ((i - 1,) if i > 1 else ())
        assert len(g.neighbors(i, EdgeType.SPEAKER)) <= k
        assert g.neighbors(i, EdgeType.SELF_LOOP) == (i,)
        if i > 1:
            assert (i - 1, i) in g.edges[EdgeType.CROSS_UTTERANCE]
    if _near_threshold(x, cfg.similarity_threshold):
        return
    scaled = build_graph(speakers, x * scale, cfg, speaker_table_size=3)
    assert set(scaled.edges[EdgeType.CROSS_UTTERANCE]) == set(g.edges[EdgeType.CROSS_UTTERANCE])
