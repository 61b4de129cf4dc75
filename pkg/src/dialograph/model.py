"""Multi-relational dialogue attention network with an exact manual backward pass.

Parameters live in an ordered ``dict[str, np.ndarray]``; see
:func:`param_shapes` for names and layouts. Attention heads are split
evenly across the four edge types, heads ``[t*H/4, (t+1)*H/4)`` serving
type ``t``. All computation is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .corpus import Dialogue
from .graph import NUM_EDGE_TYPES, DialogueGraph, EdgeType, GraphConfig, assign_speaker_indices, build_graph

ModelParams = dict[str, np.ndarray]

SPEAKER_INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_h: int
    num_classes: int
    d_s: int = 16
    d_model: int = 64
    num_heads: int = 8
    num_layers: int = 3
    dropout: float = 0.1
    layernorm_eps: float = 1e-5
    num_speakers: int = 2
    use_mrdan: bool = True
    use_dialogue_feature: bool = False

    def __post_init__(self):
        for name in ("d_h", "d_s", "d_model", "num_heads", "num_speakers"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ModelError("num_layers must be >= 0")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.num_heads % NUM_EDGE_TYPES:
            raise ModelError(f"num_heads={self.num_heads} is not divisible by {NUM_EDGE_TYPES}")
        if self.d_model % self.num_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def active_layers(self) -> int:
        return self.num_layers if self.use_mrdan else 0


def head_partition(cfg: ModelConfig) -> dict[EdgeType, list[int]]:
    per = cfg.num_heads // NUM_EDGE_TYPES
    parts = {t: list(range(t * per, (t + 1) * per)) for t in EdgeType}
    flat = [h for hs in parts.values() for h in hs]
    assert len(flat) == len(set(flat)) == cfg.num_heads
    return parts


def head_types(cfg: ModelConfig) -> np.ndarray:
    return np.repeat(np.arange(NUM_EDGE_TYPES), cfg.num_heads // NUM_EDGE_TYPES)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hk = cfg.d_model, (cfg.num_heads, cfg.d_k, cfg.d_model)
    shapes: dict[str, tuple[int, ...]] = {
        "W_p": (cfg.d_h + cfg.d_s, d),
        "E_s": (cfg.num_speakers, cfg.d_s),
    }
    for l in range(cfg.active_layers):
        shapes[f"layer{l}.W_Q"] = hk
        shapes[f"layer{l}.W_K"] = hk
        shapes[f"layer{l}.W_V"] = hk
        shapes[f"layer{l}.W_O"] = (d, d)
        shapes[f"layer{l}.ln_gain"] = (d,)
        shapes[f"layer{l}.ln_bias"] = (d,)
    head_in = d + (cfg.d_h if cfg.use_dialogue_feature else 0)
    shapes["cls.W"] = (cfg.num_classes, head_in)
    shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name == "E_s":
            params[name] = rng.normal(0.0, SPEAKER_INIT_STD, size=shape)
        elif name == "W_p":
            params[name] = _glorot(rng, shape, shape[0], shape[1])
        elif name.endswith(("W_Q", "W_K", "W_V")):
            params[name] = _glorot(rng, shape, cfg.d_model, cfg.d_k)
        elif name.endswith("W_O") or name == "cls.W":
            params[name] = _glorot(rng, shape, shape[1], shape[0])
        elif name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# --- per-dialogue building blocks -------------------------------------------


def init_node_features(dialogue: Dialogue, speaker_idx: Sequence[int], params: ModelParams) -> np.ndarray:
    """Project ``[h_i ; e_{s_i}]`` for every utterance; returns ``(M, d_model)``."""
    h = dialogue.feature_matrix()
    e = params["E_s"][np.asarray(speaker_idx, dtype=np.intp)]
    inp = np.concatenate([h, e], axis=1)
    if inp.shape[1] != params["W_p"].shape[0]:
        raise ModelError(f"input width {inp.shape[1]} does not match W_p rows {params['W_p'].shape[0]}")
    return inp @ params["W_p"]


def attention_scores(x_i: np.ndarray, neighbors: np.ndarray, w_q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    """Scaled dot-product scores of target ``x_i`` against each neighbour row."""
    d_k = w_q.shape[0]
    return (np.atleast_2d(neighbors) @ w_k.T) @ (w_q @ x_i) / math.sqrt(d_k)


def mean_pool(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).mean(axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(g: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(w @ g + b)


def layer_norm(r: np.ndarray, gain, bias, eps: float):
    mu = r.mean(axis=-1, keepdims=True)
    var = r.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (r - mu) * inv
    return xhat * gain + bias, xhat, inv


# --- batched forward / backward ---------------------------------------------


@dataclass
class Batch:
    feats: np.ndarray  # (B, M, d_h)
    speakers: np.ndarray  # (B, M) int
    node_mask: np.ndarray  # (B, M) float 0/1
    masks: np.ndarray  # (B, T, M, M) bool
    counts: np.ndarray  # (B,)
    dialogue_feats: np.ndarray  # (B, d_h)


def pack_batch(dialogues: Sequence[Dialogue], graphs: Sequence[DialogueGraph]) -> Batch:
    b = len(dialogues)
    m = max(d.num_utterances for d in dialogues)
    d_h = dialogues[0].utterances[0].feature.shape[0]
    feats = np.zeros((b, m, d_h))
    spk = np.zeros((b, m), dtype=np.intp)
    nm = np.zeros((b, m))
    masks = np.zeros((b, NUM_EDGE_TYPES, m, m), dtype=bool)
    for i, (d, g) in enumerate(zip(dialogues, graphs)):
        n = d.num_utterances
        if g.num_nodes != n:
            raise ModelError(f"graph for {d.id!r} has {g.num_nodes} nodes, dialogue has {n}")
        feats[i, :n] = d.feature_matrix()
        spk[i, :n] = g.speaker_index
        nm[i, :n] = 1.0
        masks[i, :, :n, :n] = g.type_masks
    counts = nm.sum(axis=1)
    gfeat = np.stack([np.asarray(d.dialogue_feature, dtype=np.float64) for d in dialogues])
    return Batch(feats, spk, nm, masks, counts, gfeat)


def forward_batch(
    batch: Batch,
    params: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_masks: list | None = None,
):
    """Returns ``(probs (B, K), cache)``.

    Dropout is active only when ``train`` is true and ``cfg.dropout > 0``;
    masks are drawn from ``rng`` unless supplied via ``dropout_masks``.
    """
    nm = batch.node_mask[..., None]
    emb = params["E_s"][batch.speakers]
    inp = np.concatenate([batch.feats, emb], axis=-1) * nm
    x = (inp @ params["W_p"]) * nm
    htype = head_types(cfg)
    b, m, d = x.shape
    nh, dk = cfg.num_heads, cfg.d_k
    layers = []
    for l in range(cfg.active_layers):
        p = f"layer{l}."
        xf = x.reshape(b * m, d)

        def proj(w):
            return (xf @ w.reshape(nh * dk, d).T).reshape(b, m, nh, dk).transpose(0, 2, 1, 3).copy()

        q, k, v = proj(params[p + "W_Q"]), proj(params[p + "W_K"]), proj(params[p + "W_V"])
        z, alpha = kernels.attention_forward(q, k, v, batch.masks, htype)
        zc = z.transpose(0, 2, 1, 3).reshape(b, m, d)
        o = zc @ params[p + "W_O"].T
        drop = None
        if dropout_masks is not None:
            drop = dropout_masks[l]
        elif train and cfg.dropout > 0.0:
            if rng is None:
                raise ModelError("train-mode dropout needs an rng")
            drop = (rng.random(o.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        if drop is not None:
            o = o * drop
        y, xhat, inv = layer_norm(x + o, params[p + "ln_gain"], params[p + "ln_bias"], cfg.layernorm_eps)
        layers.append({"x": x, "q": q, "k": k, "v": v, "alpha": alpha, "zc": zc, "drop": drop, "xhat": xhat, "inv": inv})
        x = y * nm
    g = x.sum(axis=1) / batch.counts[:, None]
    head_in = np.concatenate([g, batch.dialogue_feats], axis=1) if cfg.use_dialogue_feature else g
    logits = head_in @ params["cls.W"].T + params["cls.b"]
    probs = softmax(logits)
    cache = {
        "batch": batch,
        "cfg": cfg,
        "params": params,
        "inp": inp,
        "layers": layers,
        "x_final": x,
        "g": g,
        "head_in": head_in,
        "probs": probs,
    }
    return probs, cache


def backward(cache: dict | None, dprobs: np.ndarray | None = None, dlogits: np.ndarray | None = None) -> ModelParams:
    """Gradients of a scalar loss given its gradient w.r.t. probabilities or logits."""
    if cache is None:
        raise ModelError("backward needs a forward cache")
    cfg: ModelConfig = cache["cfg"]
    params: ModelParams = cache["params"]
    batch: Batch = cache["batch"]
    probs = cache["probs"]
    if dlogits is None:
        if dprobs is None:
            raise ModelError("provide dprobs or dlogits")
        dprobs = np.asarray(dprobs, dtype=np.float64)
        dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    grads: ModelParams = {}
    grads["cls.W"] = dlogits.T @ cache["head_in"]
    grads["cls.b"] = dlogits.sum(axis=0)
    dg = (dlogits @ params["cls.W"])[:, : cfg.d_model]
    nm = batch.node_mask[..., None]
    dx = dg[:, None, :] * nm / batch.counts[:, None, None]
    nh, dk = cfg.num_heads, cfg.d_k
    for l in reversed(range(cfg.active_layers)):
        p = f"layer{l}."
        c = cache["layers"][l]
        b, m, d = dx.shape
        dy = dx * nm
        xhat, inv = c["xhat"], c["inv"]
        grads[p + "ln_gain"] = (dy * xhat).sum(axis=(0, 1))
        grads[p + "ln_bias"] = dy.sum(axis=(0, 1))
        dxhat = dy * params[p + "ln_gain"]
        dr = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        do = dr if c["drop"] is None else dr * c["drop"]
        grads[p + "W_O"] = do.reshape(-1, d).T @ c["zc"].reshape(-1, d)
        dz = (do @ params[p + "W_O"]).reshape(b, m, nh, dk).transpose(0, 2, 1, 3)
        dq, dkk, dv = kernels.attention_backward(c["q"], c["k"], c["v"], c["alpha"], np.ascontiguousarray(dz))
        xf = c["x"].reshape(b * m, d)
        dxf = dr.reshape(b * m, d).copy()
        for name, dt in (("W_Q", dq), ("W_K", dkk), ("W_V", dv)):
            flat = dt.transpose(0, 2, 1, 3).reshape(b * m, nh * dk)
            w = params[p + name].reshape(nh * dk, d)
            grads[p + name] = (flat.T @ xf).reshape(nh, dk, d)
            dxf += flat @ w
        dx = dxf.reshape(b, m, d)
    dx0 = dx * nm
    inp = cache["inp"]
    din = inp.shape[-1]
    grads["W_p"] = inp.reshape(-1, din).T @ dx0.reshape(-1, cfg.d_model)
    dinp = dx0 @ params["W_p"].T
    de = np.zeros_like(params["E_s"])
    valid = batch.node_mask > 0
    np.add.at(de, batch.speakers[valid], dinp[..., cfg.d_h:][valid])
    grads["E_s"] = de
    return {name: grads[name] for name in params}


# --- graphs and whole-dialogue entry points ---------------------------------


def build_graphs(
    dialogues: Sequence[Dialogue],
    params: ModelParams,
    cfg: ModelConfig,
    graph_cfg: GraphConfig,
    theta: float | None = None,
) -> list[DialogueGraph]:
    """Graphs whose cross-utterance edges use the current projected features."""
    out = []
    for d in dialogues:
        idx = assign_speaker_indices(d, cfg.num_speakers)
        x = init_node_features(d, idx, params)
        out.append(build_graph(d, x, graph_cfg, theta=theta, speaker_table_size=cfg.num_speakers))
    return out


def forward(
    dialogue: Dialogue,
    params: ModelParams,
    cfg: ModelConfig,
    graph_cfg: GraphConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    graph: DialogueGraph | None = None,
):
    """Class distribution for one dialogue; the cache is ``None`` in eval mode."""
    if mode not in ("train", "eval"):
        raise ModelError(f"unknown mode {mode!r}")
    if graph is None:
        graph = build_graphs([dialogue], params, cfg, graph_cfg)[0]
    probs, cache = forward_batch(pack_batch([dialogue], [graph]), params, cfg, train=mode == "train", rng=rng)
    return probs[0], (cache if mode == "train" else None)


def layer_forward(
    x: np.ndarray,
    graph: DialogueGraph,
    params: ModelParams,
    layer: int,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One relational attention layer on a single dialogue's ``(M, d)`` node matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != graph.num_nodes:
        raise ModelError("node count does not match graph")
    p = f"layer{layer}."
    nh, dk, d = cfg.num_heads, cfg.d_k, cfg.d_model

    def proj(w):
        return (x @ w.reshape(nh * dk, d).T).reshape(1, x.shape[0], nh, dk).transpose(0, 2, 1, 3).copy()

    q, k, v = proj(params[p + "W_Q"]), proj(params[p + "W_K"]), proj(params[p + "W_V"])
    z, _ = kernels.attention_forward(q, k, v, graph.type_masks[None], head_types(cfg))
    o = z[0].transpose(1, 0, 2).reshape(x.shape[0], d) @ params[p + "W_O"].T
    if mode == "train" and cfg.dropout > 0.0:
        o = o * (rng.random(o.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
    y, _, _ = layer_norm(x + o, params[p + "ln_gain"], params[p + "ln_bias"], cfg.layernorm_eps)
    return y


def attention_weights(x: np.ndarray, graph: DialogueGraph, params: ModelParams, layer: int, cfg: ModelConfig) -> np.ndarray:
    """Attention weights ``(H, M, M)`` of one layer, ``[head, target, source]``."""
    nh, dk, d = cfg.num_heads, cfg.d_k, cfg.d_model
    p = f"layer{layer}."

    def proj(w):
        return (x @ w.reshape(nh * dk, d).T).reshape(1, x.shape[0], nh, dk).transpose(0, 2, 1, 3).copy()

    _, alpha = kernels.attention_forward(
        proj(params[p + "W_Q"]), proj(params[p + "W_K"]), proj(params[p + "W_V"]), graph.type_masks[None], head_types(cfg)
    )
    return alpha[0]
