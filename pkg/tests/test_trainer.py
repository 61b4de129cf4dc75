import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dialograph.corpus import SynthSpec, generate_synthetic
from dialograph.graph import GraphConfig
from dialograph.model import ModelConfig, init_params
from dialograph.trainer import (
    AdamW,
    TrainConfig,
    Trainer,
    TrainingError,
    compute_metrics,
    cosine_warmup_lr,
    cross_entropy,
    evaluate,
)


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 1.0], 2) == 0.0
    assert cross_entropy([0.25] * 4, 3) == pytest.approx(1.3863, abs=1e-4)
    assert cross_entropy([1.0, 0.0], 2) == pytest.approx(27.631, abs=1e-3)
    with pytest.raises(TrainingError):
        cross_entropy([0.5, 0.5], 0)


def test_lr_examples():
    total, base, wf = 100, 1e-3, 0.1
    assert cosine_warmup_lr(0, total, base, wf) == 0.0
    assert cosine_warmup_lr(10, total, base, wf) == base
    assert abs(cosine_warmup_lr(total, total, base, wf)) < 1e-12
    # continuity at the junction
    assert cosine_warmup_lr(9, total, base, wf) == pytest.approx(0.9 * base)
    assert cosine_warmup_lr(11, total, base, wf) == pytest.approx(base, rel=1e-3)


def test_adamw_examples():
    p = {"w": np.array([0.5])}
    opt = AdamW(p, weight_decay=0.0)
    opt.step(p, {"w": np.zeros(1)}, 0.1)
    assert p["w"][0] == 0.5
    lr, wd, theta0 = 0.01, 0.1, 2.0
    p = {"w": np.array([theta0])}
    AdamW(p, weight_decay=wd).step(p, {"w": np.ones(1)}, lr)
    delta = p["w"][0] - theta0
    # bias-corrected moments are exactly 1 on the first step
    assert delta == pytest.approx(-lr * (1.0 / (1.0 + 1e-8) + wd * theta0), abs=1e-9)
    assert delta == pytest.approx(-lr * (1 + wd * theta0), abs=1e-9)


def test_adamw_decay_is_decoupled():
    lr, wd = 0.05, 0.2
    p = {"w": np.array([3.0, -1.0])}
    opt = AdamW(p, weight_decay=wd)
    for t in range(1, 6):
        opt.step(p, {"w": np.zeros(2)}, lr)
        np.testing.assert_allclose(p["w"], np.array([3.0, -1.0]) * (1 - lr * wd) ** t, rtol=1e-12)


def test_adamw_rejects_non_finite():
    p = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(TrainingError, match="'b'"):
        AdamW(p).step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, 0.1)
    assert np.all(p["a"] == 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_zero_lr_is_identity(seed):
    rng = np.random.default_rng(seed)
    p = {"w": rng.normal(size=3)}
    before = p["w"].copy()
    AdamW(p, weight_decay=0.3).step(p, {"w": rng.normal(size=3)}, 0.0)
    assert np.array_equal(p["w"], before)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6), st.integers(0, 5))
def test_cross_entropy_nonnegative(raw, idx):
    q = np.asarray(raw) + 1e-3
    q /= q.sum()
    label = idx % len(q) + 1
    assert cross_entropy(q, label) >= 0.0


def test_metrics_examples():
    truth = [1, 2, 3, 4] * 5
    perfect = compute_metrics(truth, truth, 4)
    assert perfect.accuracy == 1.0 and perfect.f1 == [1.0] * 4 and perfect.macro_f1 == 1.0
    lazy = compute_metrics(truth, [1] * 20, 4)
    assert lazy.accuracy == 0.25
    assert lazy.f1[0] == pytest.approx(0.4) and lazy.f1[1:] == [0.0, 0.0, 0.0]
    rng = np.random.default_rng(0)
    pred = rng.integers(1, 5, size=20).tolist()
    m = compute_metrics(truth, pred, 4)
    assert m.weighted_f1 == pytest.approx(m.macro_f1, abs=1e-12)
    perm = rng.permutation(20)
    shuffled = compute_metrics([truth[i] for i in perm], [pred[i] for i in perm], 4)
    assert shuffled.to_json() == m.to_json()


def _setup(seed, epochs=5):
    pools, _ = generate_synthetic(
        SynthSpec(num_classes=2, feature_dim=6, dialogues_per_class=30, class_separation=4.0, noise_std=1.0, seed=seed)
    )
    mcfg = ModelConfig(d_h=6, num_classes=2, d_s=4, d_model=16, num_heads=4, num_layers=1)
    tcfg = TrainConfig(base_lr=3e-3, epochs=epochs, batch_size=8, seed=seed)
    return pools, mcfg, tcfg


def test_training_is_deterministic():
    pools, mcfg, tcfg = _setup(0, epochs=2)
    runs = []
    for _ in range(2):
        tr = Trainer(init_params(mcfg, 0), mcfg, GraphConfig(), tcfg, len(pools.labeled))
        losses = [tr.train_epoch(pools).loss for _ in range(2)]
        runs.append((losses, {k: v.tobytes() for k, v in tr.params.items()}))
    assert runs[0] == runs[1]


def test_lr_trace_matches_schedule():
    pools, mcfg, tcfg = _setup(0, epochs=3)
    tr = Trainer(init_params(mcfg, 0), mcfg, GraphConfig(), tcfg, len(pools.labeled))
    steps = tr.steps_per_epoch
    for e in range(3):
        res = tr.train_epoch(pools)
        expected = [cosine_warmup_lr(e * steps + i, tr.total_steps, tcfg.base_lr, tcfg.warmup_fraction) for i in range(steps)]
        assert res.lr_trace == expected
        assert res.lr_last == expected[-1]


def test_loss_decreases_over_first_epochs():
    curves = []
    for seed in range(5):
        pools, mcfg, tcfg = _setup(seed)
        tr = Trainer(init_params(mcfg, seed), mcfg, GraphConfig(), tcfg, len(pools.labeled))
        curves.append([tr.train_epoch(pools).loss for _ in range(5)])
    median = np.median(np.array(curves), axis=0)
    assert np.all(np.diff(median) < 0), median


def test_evaluate_reports_metrics():
    pools, mcfg, tcfg = _setup(1)
    params = init_params(mcfg, 1)
    truth = {d.id: d.label for d in pools.labeled}
    m = evaluate(pools.labeled, params, mcfg, GraphConfig(), truth)
    assert 0.0 <= m.accuracy <= 1.0 and sum(m.support) == len(pools.labeled)


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0)
