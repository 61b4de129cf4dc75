"""Pure numpy typed-neighbourhood attention (fallback for the compiled kernel).

Shapes: ``q, k, v`` are ``(B, H, M, dk)``; ``masks`` is ``(B, T, M, M)``
indexed ``[b, type, target, source]``; ``head_type[h]`` is the edge type
served by head ``h``. Targets with an empty neighbourhood get zero
attention weights and therefore a zero output.
"""

import numpy as np


def attention_forward(q, k, v, masks, head_type):
    scale = 1.0 / np.sqrt(q.shape[-1])
    mask = masks[:, head_type].astype(bool, copy=False)
    scores = np.where(mask, q @ k.swapaxes(-1, -2) * scale, -np.inf)
    rowmax = scores.max(axis=-1, keepdims=True)
    rowmax[~np.isfinite(rowmax)] = 0.0
    e = np.where(mask, np.exp(scores - rowmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    alpha = e / np.where(denom > 0.0, denom, 1.0)
    return alpha @ v, alpha


def attention_backward(q, k, v, alpha, dout):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dalpha = dout @ v.swapaxes(-1, -2)
    dv = alpha.swapaxes(-1, -2) @ dout
    ds = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    return dq, dk, dv
