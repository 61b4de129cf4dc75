import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dialograph import kernels


def _inputs(seed, b=2, h=4, m=6, dk=3):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(b, h, m, dk)) for _ in range(3))
    masks = rng.random((b, 4, m, m)) < 0.4
    htype = np.repeat(np.arange(4), h // 4).astype(np.intp)
    return q, k, v, masks, htype


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([4, 8]), st.integers(1, 7))
def test_backends_agree(seed, heads, m):
    q, k, v, masks, htype = _inputs(seed, h=heads, m=m)
    out_a, alpha_a = kernels.attention_forward(q, k, v, masks, htype)
    out_b, alpha_b = kernels.python_attention_forward(q, k, v, masks, htype)
    np.testing.assert_allclose(out_a, out_b, atol=1e-12)
    np.testing.assert_allclose(alpha_a, alpha_b, atol=1e-12)
    dout = np.random.default_rng(seed + 1).normal(size=out_a.shape)
    for ga, gb in zip(
        kernels.attention_backward(q, k, v, alpha_a, dout),
        kernels.python_attention_backward(q, k, v, alpha_b, dout),
    ):
        np.testing.assert_allclose(ga, gb, atol=1e-12)


def test_empty_neighbourhood_gives_zero():
    q, k, v, masks, htype = _inputs(0)
    masks[:] = False
    out, alpha = kernels.python_attention_forward(q, k, v, masks, htype)
    assert np.all(out == 0) and np.all(alpha == 0)


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled extension not built")
def test_compiled_empty_neighbourhood():
    q, k, v, masks, htype = _inputs(0)
    masks[:] = False
    out, _ = kernels.attention_forward(q, k, v, masks, htype)
    assert np.all(out == 0)
