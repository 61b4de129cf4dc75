"""Loss/gradient plumbing shared by the model tests and the acceptance suite."""

import numpy as np

from dialograph.graph import GraphConfig
from dialograph.model import ModelConfig, backward, build_graphs, forward_batch, init_params, pack_batch
from conftest import random_dialogue


def gradcheck_case(seed, m=5, d=8, heads=4, layers=2, k=3, d_h=6, n=2):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_h=d_h, num_classes=k, d_s=4, d_model=d, num_heads=heads, num_layers=layers, dropout=0.0)
    params = init_params(cfg, seed)
    dialogues = [random_dialogue(rng, f"g{i}", d_h=d_h, m=m, label=int(rng.integers(1, k + 1))) for i in range(n)]
    graphs = build_graphs(dialogues, params, cfg, GraphConfig(similarity_threshold=0.2))
    batch = pack_batch(dialogues, graphs)
    onehot = np.eye(k)[[dl.label - 1 for dl in dialogues]]

    def loss(p):
        probs, _ = forward_batch(batch, p, cfg)
        return float(-np.sum(onehot * np.log(probs)))

    probs, cache = forward_batch(batch, params, cfg)
    grads = backward(cache, dlogits=probs - onehot)
    return params, loss, grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(err.max()))
    return worst
