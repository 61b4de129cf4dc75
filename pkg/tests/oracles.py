"""Independent reference implementations used as test oracles.

Everything here is written with plain loops and the ``math`` module so it
shares no code path with the package internals it checks.
"""

import math
from fractions import Fraction


def cos_py(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return dot / (nu * nv)


def brute_force_edges(speakers, x, k, theta):
    """Typed edge sets straight from the rules, as sets of 1-based (src, dst)."""
    m = len(speakers)
    x = [list(map(float, row)) for row in x]
    temporal = {(i, i + 1) for i in range(1, m)}
    speaker = set()
    for i in range(1, m + 1):
        same = [j for j in range(1, i) if speakers[j - 1] == speakers[i - 1]]
        speaker |= {(j, i) for j in same[-k:]}
    cross = set()
    for i in range(1, m + 1):
        for j in range(1, i):
            if j == i - 1 or cos_py(x[j - 1], x[i - 1]) > theta:
                cross.add((j, i))
    self_loops = {(i, i) for i in range(1, m + 1)}
    return {"temporal": temporal, "speaker": speaker, "cross": cross, "self": self_loops}


def _matvec(w, x):
    return [sum(w[r][c] * x[c] for c in range(len(x))) for r in range(len(w))]


def dense_layer(x, neighbors, wq, wk, wv, wo, gain, bias, eps):
    """Straight-line relational attention layer.

    ``x``: list of M node vectors; ``neighbors[t][i]``: list of 0-based
    sources of target ``i`` under type ``t``; ``wq[h]`` etc. are d_k x d
    nested lists; head ``h`` serves type ``h // (H // 4)``.
    """
    m, nh = len(x), len(wq)
    per = nh // 4
    d_k = len(wq[0])
    out = []
    for i in range(m):
        concat = []
        for h in range(nh):
            t = h // per
            nb = neighbors[t][i]
            if not nb:
                concat.extend([0.0] * d_k)
                continue
            qi = _matvec(wq[h], x[i])
            scores = []
            for j in nb:
                kj = _matvec(wk[h], x[j])
                scores.append(sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d_k))
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            tot = sum(ex)
            z = [0.0] * d_k
            for a, j in zip(ex, nb):
                vj = _matvec(wv[h], x[j])
                for c in range(d_k):
                    z[c] += (a / tot) * vj[c]
            concat.extend(z)
        o = _matvec(wo, concat)
        r = [a + b for a, b in zip(x[i], o)]
        mu = sum(r) / len(r)
        var = sum((a - mu) ** 2 for a in r) / len(r)
        out.append([(a - mu) / math.sqrt(var + eps) * g + b for a, g, b in zip(r, gain, bias)])
    return out


def central_difference(loss, params, step=1e-5):
    """Numerical gradient of ``loss(params)`` for every entry of every tensor."""
    import numpy as np

    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            lp = loss(params)
            arr[idx] = orig - step
            lm = loss(params)
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * step)
        grads[name] = g
    return grads


def margin_filter_oracle(q, tau, eps):
    """Conditions (threshold exceedance, max margin, tolerance) checked one by one."""
    valid = [c for c in range(len(q)) if q[c] > tau[c]]
    if not valid:
        return None
    best_margin = max(q[c] - tau[c] for c in valid)
    c_star = min(c for c in valid if q[c] - tau[c] == best_margin)
    if best_margin > eps:
        return c_star + 1, best_margin
    return None


def topk_oracle(candidates, top_percent, min_count):
    """Sort-based selection with k = max(floor(P*n), min(min_count, n)) in exact decimal arithmetic."""
    p = Fraction(repr(top_percent))
    out = []
    for label in sorted({c.label for c in candidates}):
        group = [c for c in candidates if c.label == label]
        group.sort(key=lambda c: c.dialogue_id)
        group.sort(key=lambda c: c.confidence, reverse=True)
        n = len(group)
        k = max(math.floor(p * n), min(min_count, n))
        out.extend(group[:k])
    return out
