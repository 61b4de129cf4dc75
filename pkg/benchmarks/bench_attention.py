"""Time the compiled attention kernels against the numpy fallback.

    python3 benchmarks/bench_attention.py [--batch 16] [--heads 8] [--nodes 10] [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from dialograph import kernels
from dialograph.graph import GraphConfig, build_graph


def make_inputs(batch, heads, nodes, d_k, seed=0):
    """Random projections over the typed masks of random two-speaker dialogues."""
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(batch, heads, nodes, d_k)) for _ in range(3))
    cfg = GraphConfig()
    masks = np.stack([
        build_graph([f"S{s}" for s in rng.integers(2, size=nodes)], rng.normal(size=(nodes, 8)), cfg).type_masks
        for _ in range(batch)
    ])
    head_type = np.repeat(np.arange(4), heads // 4).astype(np.intp)
    return q, k, v, masks, head_type


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--nodes", type=int, default=10)
    ap.add_argument("--d-k", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    q, k, v, masks, ht = make_inputs(args.batch, args.heads, args.nodes, args.d_k)
    dout = np.random.default_rng(1).normal(size=q.shape)
    backends = {"python": (kernels.python_attention_forward, kernels.python_attention_backward)}
    if kernels.BACKEND == "compiled":
        backends["compiled"] = (kernels.attention_forward, kernels.attention_backward)
    else:
        print("compiled extension unavailable; timing the numpy fallback only")

    print(f"B={args.batch} H={args.heads} M={args.nodes} d_k={args.d_k}, best of 5 x {args.repeat} calls")
    results = {}
    for name, (fwd, bwd) in backends.items():
        _, alpha = fwd(q, k, v, masks, ht)
        f = min(timeit.repeat(lambda: fwd(q, k, v, masks, ht), number=args.repeat, repeat=5)) / args.repeat
        b = min(timeit.repeat(lambda: bwd(q, k, v, alpha, dout), number=args.repeat, repeat=5)) / args.repeat
        results[name] = (f, b)
        print(f"{name:>9}: forward {f * 1e6:9.1f} us   backward {b * 1e6:9.1f} us")
    if len(results) == 2:
        (pf, pb), (cf, cb) = results["python"], results["compiled"]
        print(f"  speedup: forward x{pf / cf:.1f}   backward x{pb / cb:.1f}")


if __name__ == "__main__":
    main()
