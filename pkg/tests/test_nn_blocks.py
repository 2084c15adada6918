import numpy as np
import pytest

from iamsb import nn_blocks as nn
from iamsb import numerics as nm
from iamsb.numerics import Tensor


def ident_mha(c, heads=1):
    eye = lambda: Tensor(np.eye(c), requires_grad=True)
    return nn.MhaParams(eye(), eye(), eye(), eye(), heads)


def rand_mha(rng, c, heads):
    w = lambda: Tensor(rng.normal(0, 1 / np.sqrt(c), size=(c, c)), requires_grad=True)
    return nn.MhaParams(w(), w(), w(), w(), heads)


def test_mha_single_token_identity():
    v = np.array([[0.3, -0.7, 1.1, 0.2]])
    out = nn.mha(Tensor(np.ones((1, 4))), Tensor(v), Tensor(v), ident_mha(4))
    np.testing.assert_allclose(out.data, v, rtol=1e-12)


def test_mha_two_identical_keys_average():
    q = np.array([[1.0, 0.0, 0.0, 0.0]])
    k = np.tile(np.array([[0.5, 0.5, 0.0, 0.0]]), (2, 1))
    v = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    out = nn.mha(Tensor(q), Tensor(k), Tensor(v), ident_mha(4))
    np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0, 0.0]], atol=1e-12)


def test_mha_matches_per_head_reference():
    rng = np.random.default_rng(0)
    c, heads, lq, lk = 4, 2, 3, 5
    p = rand_mha(rng, c, heads)
    q = rng.normal(size=(lq, c))
    k = rng.normal(size=(lk, c))
    v = rng.normal(size=(lk, c))
    out = nn.mha(Tensor(q), Tensor(k), Tensor(v), p).data

    # brute-force single-head-at-a-time assembly
    d = c // heads
    concat = np.zeros((lq, c))
    for h in range(heads):
        wq = p.wq.data[:, h * d:(h + 1) * d]
        wk = p.wk.data[:, h * d:(h + 1) * d]
        wv = p.wv.data[:, h * d:(h + 1) * d]
        scores = (q @ wq) @ (k @ wk).T / np.sqrt(d)
        scores = np.exp(scores - scores.max(axis=1, keepdims=True))
        att = scores / scores.sum(axis=1, keepdims=True)
        concat[:, h * d:(h + 1) * d] = att @ (v @ wv)
    expected = concat @ p.wo.data
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_mha_shape_errors():
    p = ident_mha(4)
    with pytest.raises(nn.BlockError, match="mha-shape"):
        nn.mha(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), p)
    with pytest.raises(nn.BlockError, match="mha-shape"):
        nn.MhaParams(Tensor(np.ones((4, 3))), Tensor(np.eye(4)), Tensor(np.eye(4)),
                     Tensor(np.eye(4)), 1)


def test_mha_key_value_permutation_equivariance():
    rng = np.random.default_rng(3)
    p = rand_mha(rng, 8, 2)
    q = rng.normal(size=(4, 8))
    k = rng.normal(size=(6, 8))
    v = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    out1 = nn.mha(Tensor(q), Tensor(k), Tensor(v), p).data
    out2 = nn.mha(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), p).data
    np.testing.assert_allclose(out1, out2, atol=1e-12)


def test_mha_per_query_isolation():
    rng = np.random.default_rng(4)
    p = rand_mha(rng, 8, 2)
    q = rng.normal(size=(3, 8))
    kv = rng.normal(size=(3, 4, 8))
    out = nn.mha_per_query(Tensor(q), Tensor(kv), p).data
    kv2 = kv.copy()
    kv2[1] = rng.normal(size=(4, 8))  # only query 1's witnesses change
    out2 = nn.mha_per_query(Tensor(q), Tensor(kv2), p).data
    np.testing.assert_allclose(out[0], out2[0], atol=1e-12)
    np.testing.assert_allclose(out[2], out2[2], atol=1e-12)
    assert np.abs(out[1] - out2[1]).max() > 1e-8


def test_ffn_dim_rounding():
    assert nn.ffn_dim(2) == 5  # 16/3 rounds to 5
    assert nn.ffn_dim(1, alpha=0.1) == 1
    assert nn.ffn_dim(32) == 85


def test_swiglu_zero_input():
    rng = np.random.default_rng(5)
    p = nn.FfnParams(Tensor(rng.normal(size=(4, 11))), Tensor(rng.normal(size=(4, 11))),
                     Tensor(rng.normal(size=(11, 4))))
    out = nn.swiglu_ffn(Tensor(np.zeros((3, 4))), p)
    np.testing.assert_allclose(out.data, 0.0)


def test_swiglu_zero_gate():
    rng = np.random.default_rng(6)
    p = nn.FfnParams(Tensor(rng.normal(size=(4, 11))), Tensor(np.zeros((4, 11))),
                     Tensor(rng.normal(size=(11, 4))))
    out = nn.swiglu_ffn(Tensor(rng.normal(size=(3, 4))), p)
    np.testing.assert_allclose(out.data, 0.0)


def test_swiglu_matches_elementwise_reference():
    rng = np.random.default_rng(7)
    c, dff = 2, nn.ffn_dim(2)
    assert dff == 5
    w1 = rng.normal(size=(c, dff))
    w2 = rng.normal(size=(c, dff))
    w3 = rng.normal(size=(dff, c))
    x = rng.normal(size=(4, c))
    u = x @ w1
    silu = u / (1.0 + np.exp(-u))
    expected = (silu * (x @ w2)) @ w3
    out = nn.swiglu_ffn(Tensor(x), nn.FfnParams(Tensor(w1), Tensor(w2), Tensor(w3)))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_phi_at_zero():
    assert nn.phi(Tensor(0.0)).item() == pytest.approx(0.5)


def test_phi_saturation():
    assert abs(nn.phi(Tensor(20.0)).item() - 1.0) <= 1e-8
    assert abs(nn.phi(Tensor(-20.0)).item() - 0.0) <= 1e-8


def test_phi_at_one():
    expected = (1.0 + np.tanh(1.0)) / 2.0
    assert nn.phi(Tensor(1.0)).item() == pytest.approx(expected, abs=1e-12)


def test_phi_monotone_and_bounded():
    xs = np.linspace(-8, 8, 201)
    ys = nn.phi(Tensor(xs)).data
    assert (np.diff(ys) > 0).all()
    assert (ys > 0).all() and (ys < 1).all()


def head(c, w=None, b=None):
    w = np.zeros((c, 3)) if w is None else w
    b = np.zeros(3) if b is None else b
    return nn.HeadParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def test_head_decode_zero_weights():
    dec = nn.head_decode(Tensor(np.random.default_rng(0).normal(size=(4, 6))), head(6))
    for s, d, conf in dec.triples():
        assert (s, d, conf) == (0.5, 0.5, 0.5)


def test_head_decode_saturated_bias():
    dec = nn.head_decode(Tensor(np.zeros((2, 6))), head(6, b=np.full(3, 20.0)))
    for s, d, conf in dec.triples():
        assert s == pytest.approx(1.0, abs=1e-8)
        assert d == pytest.approx(1.0, abs=1e-8)
        assert conf == pytest.approx(1.0, abs=1e-8)


def test_head_decode_compositional():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(5, 6))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    dec = nn.head_decode(Tensor(z), head(6, w, b))
    raw = z @ w + b
    expected = 0.5 * (1.0 + np.tanh(raw))
    np.testing.assert_allclose(dec.start.data, expected[:, 0], rtol=1e-12)
    np.testing.assert_allclose(dec.dur.data, expected[:, 1], rtol=1e-12)
    np.testing.assert_allclose(dec.conf.data, expected[:, 2], rtol=1e-12)


def test_head_decode_range_and_degenerate_rejection():
    rng = np.random.default_rng(9)
    z = rng.normal(scale=30.0, size=(8, 6))
    dec = nn.head_decode(Tensor(z), head(6, rng.normal(size=(6, 3)), rng.normal(size=3)))
    for s, d, conf in dec.triples():
        assert 0.0 <= s <= 1.0 and 0.0 <= d <= 1.0 and 0.0 <= conf <= 1.0
        if d <= nn.DEGENERATE_DURATION:
            assert conf == 0.0


def test_blocks_gradients_match_finite_differences():
    from iamsb.numerics import ParamStore, finite_diff_grad, max_relative_error

    rng = np.random.default_rng(10)
    store = ParamStore(10)
    p = nn.MhaParams(store.param("wq", (6, 6)), store.param("wk", (6, 6)),
                     store.param("wv", (6, 6)), store.param("wo", (6, 6)), heads=2)
    q = Tensor(rng.normal(size=(3, 6)))
    k = Tensor(rng.normal(size=(4, 6)))
    v = Tensor(rng.normal(size=(4, 6)))
    weight = rng.normal(size=(3, 6))

    def loss():
        return nm.tsum(nm.mul(nn.mha(q, k, v, p), weight))

    bp = store.gradients(loss())

    def f():
        with nm.no_grad():
            return loss().item()

    fd = finite_diff_grad(f, store.items())
    assert max_relative_error(bp, fd) <= 1e-4
