"""Attention baseline: oracle equivalence, mask semantics, gradients."""

import math

import numpy as np
import pytest

from polymix import attention as A
from polymix import mixer as M
from polymix import tensor as T
from polymix.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def make_params(d=6, heads=2, seed=0):
    return A.init_mha_params(d, heads, rng=rng(seed))


def mha_oracle(xq, xc, p, dense_mask=None):
    """Per-head scalar-loop attention; dense_mask is (b, nq, nc) of {0,1}."""
    b, nq, d = xq.shape
    nc = xc.shape[1]
    h = p.heads
    dh = d // h
    q = xq @ p.w_q.data
    k = xc @ p.w_k.data
    v = xc @ p.w_v.data
    out = np.zeros((b, nq, d))
    for bi in range(b):
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            for i in range(nq):
                scores = []
                for j in range(nc):
                    if dense_mask is not None and dense_mask[bi, i, j] == 0:
                        scores.append(None)
                    else:
                        scores.append(float(q[bi, i, sl] @ k[bi, j, sl]) / math.sqrt(dh))
                finite = [s for s in scores if s is not None]
                mx = max(finite)
                weights = [0.0 if s is None else math.exp(s - mx) for s in scores]
                z = sum(weights)
                acc = np.zeros(dh)
                for j, w in enumerate(weights):
                    acc += (w / z) * v[bi, j, sl]
                out[bi, i, sl] = acc
    return out @ p.w_o.data


def test_head_indivisible_raises():
    with pytest.raises(T.ShapeError):
        A.init_mha_params(7, 2)


def test_single_token_is_value_projection():
    p = make_params(d=6, heads=2, seed=1)
    x = rng(1).standard_normal((1, 1, 6))
    got = A.mha_forward(Tensor(x), p).data
    want = (x @ p.w_v.data) @ p.w_o.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_uniform_keys_average_values():
    p = make_params(d=6, heads=2, seed=2)
    r = rng(2)
    xq = r.standard_normal((1, 4, 6))
    xc = np.broadcast_to(r.standard_normal(6), (1, 5, 6)).copy()
    xc_vals = r.standard_normal((1, 5, 6))
    # identical keys but distinct values: route values through w_v only
    p.w_k.data[:] = p.w_k.data  # keys come from xc, all rows equal
    got = A.mha_forward(Tensor(xq), p, xc=Tensor(xc)).data
    want = np.broadcast_to(((xc @ p.w_v.data).mean(axis=1) @ p.w_o.data), (4, 6))
    np.testing.assert_allclose(got[0], want, atol=1e-12)
    # and the weights really are 1/n
    probs = A.attention_weights(Tensor(xq), p, xc=Tensor(xc))
    np.testing.assert_allclose(probs, np.full_like(probs, 1 / 5), atol=1e-12)
    del xc_vals


@pytest.mark.parametrize("mask_kind", ["none", "causal", "block", "padding", "full"])
def test_matches_per_head_oracle(mask_kind):
    r = rng(30)
    b, n, d = 2, 5, 6
    p = make_params(d=d, heads=2, seed=3)
    xq = r.standard_normal((b, n, d))
    xc = r.standard_normal((b, n, d))
    if mask_kind == "none":
        mask, dense = None, None
    elif mask_kind == "causal":
        mask = M.Causal()
        dense = mask.dense(b, n)
    elif mask_kind == "block":
        mask = M.BlockCausal(2)
        dense = mask.dense(b, n)
    elif mask_kind == "padding":
        valid = np.ones((b, n))
        valid[:, -1] = 0.0
        mask = M.Padding(valid)
        dense = np.broadcast_to(valid[:, None, :], (b, n, n)).copy()
    else:
        dense = (r.uniform(size=(b, n, n)) > 0.3).astype(float)
        dense[:, :, 0] = 1.0  # keep every row attendable
        mask = M.Full(dense)
    got = A.mha_forward(Tensor(xq), p, mask, xc=Tensor(xc)).data
    want = mha_oracle(xq, xc, p, dense)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_rows_stochastic():
    p = make_params(d=6, heads=3, seed=4)
    x = rng(5).standard_normal((2, 7, 6))
    for mask in (None, M.Causal(), M.BlockCausal(3)):
        probs = A.attention_weights(Tensor(x), p, mask)
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones((2, 3, 7)), atol=1e-12)


def test_fully_masked_row_yields_zero_output():
    p = make_params(d=6, heads=2, seed=5)
    x = rng(6).standard_normal((1, 3, 6))
    dense = np.ones((1, 3, 3))
    dense[0, 1, :] = 0.0
    got = A.mha_forward(Tensor(x), p, M.Full(dense)).data
    assert np.isfinite(got).all()
    np.testing.assert_allclose(got[0, 1], np.zeros(6), atol=1e-15)


def test_causal_future_has_exactly_zero_influence():
    p = make_params(d=6, heads=2, seed=7)
    r = rng(7)
    x = r.standard_normal((1, 6, 6))
    base = A.mha_forward(Tensor(x), p, M.Causal()).data
    x2 = x.copy()
    x2[0, 4:] += r.standard_normal((2, 6)) * 3.0
    pert = A.mha_forward(Tensor(x2), p, M.Causal()).data
    assert np.max(np.abs(pert[0, :4] - base[0, :4])) <= 1e-12


def test_gradcheck_through_attention():
    r = rng(8)
    b, n, d = 1, 4, 6
    p = make_params(d=d, heads=2, seed=8)
    x = Tensor(r.uniform(-2, 2, size=(b, n, d)), requires_grad=True, name="x")
    params = [x] + list(p.tensors().values())

    for mask in (None, M.Causal()):
        def build(mask=mask):
            y = A.mha_forward(x, p, mask)
            return T.reduce_sum(T.mul(y, y))

        err, name = T.check_gradients(build, params)
        assert err <= 1e-4, f"gradcheck failed on {name}: {err:.3e}"


def test_cross_attention_shapes():
    p = make_params(d=6, heads=2, seed=9)
    xq = Tensor(rng(9).standard_normal((2, 3, 6)))
    xc = Tensor(rng(10).standard_normal((2, 8, 6)))
    out = A.mha_forward(xq, p, xc=xc)
    assert out.shape == (2, 3, 6)
