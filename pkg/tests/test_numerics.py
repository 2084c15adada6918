import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iamsb import numerics as nm
from iamsb.checks import check_grad_ops
from iamsb.numerics import (NumericsError, ParamStore, Tensor, backward,
                            finite_diff_grad, load_checkpoint,
                            max_relative_error, save_checkpoint)


def test_softmax_symmetry():
    out = nm.softmax(Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_shift_invariance_no_overflow():
    out = nm.softmax(Tensor([1000.0, 1000.0, 1000.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])
    assert np.isfinite(out.data).all()


def test_softmax_direct_evaluation():
    # straightforward exp-normalize oracle
    x = [1.0, 2.0, 3.0]
    exps = [np.exp(v) for v in x]
    expected = [e / sum(exps) for e in exps]
    out = nm.softmax(Tensor(x), axis=0)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_softmax_empty_axis_errors():
    with pytest.raises(NumericsError, match="empty-reduction"):
        nm.softmax(Tensor(np.zeros((3, 0))), axis=1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
                min_size=1, max_size=8).filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_softmax_rows_sum_to_one(rows):
    out = nm.softmax(Tensor(np.array(rows)), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert (out.data >= 0).all()


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 4), 3.7))
    out = nm.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-3)


def test_layer_norm_hand_case():
    out = nm.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_zero_gain_gives_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    bias = Tensor(np.arange(5.0))
    out = nm.layer_norm(x, Tensor(np.zeros(5)), bias)
    np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (3, 1)))


def test_layer_norm_standardizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(6, 16)))
    out = nm.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    mean = out.data.mean(axis=-1)
    var = out.data.var(axis=-1)
    assert np.abs(mean).max() <= 1e-9
    assert np.abs(var - 1.0).max() <= 1e-6


def test_backward_sum_gives_ones():
    store = ParamStore(0)
    p = store.param("p", (3, 2))
    grads = store.gradients(nm.tsum(p))
    np.testing.assert_allclose(grads["p"], np.ones((3, 2)))


def test_backward_quadratic_gives_param():
    store = ParamStore(0)
    p = store.param("p", (4,))
    grads = store.gradients(nm.mul(nm.square_norm(p), 0.5))
    np.testing.assert_allclose(grads["p"], p.data, rtol=1e-12)


def test_backward_nonscalar_errors():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NumericsError, match="backward-on-nonscalar"):
        backward(nm.mul(p, 2.0))


def test_backward_unreachable_param_gets_zero():
    store = ParamStore(0)
    p = store.param("used", (2,))
    q = store.param("unused", (3,))
    grads = store.gradients(nm.tsum(p))
    np.testing.assert_allclose(grads["unused"], np.zeros(3))
    assert grads["used"].shape == (2,)


def test_backward_accumulates_across_paths():
    store = ParamStore(0)
    p = store.param("p", (3,))
    loss = nm.add(nm.tsum(p), nm.tsum(nm.mul(p, p)))
    grads = store.gradients(loss)
    np.testing.assert_allclose(grads["p"], 1.0 + 2.0 * p.data, rtol=1e-12)


def test_finite_diff_quadratic():
    t = Tensor(np.array([3.0]), requires_grad=True)
    grads = finite_diff_grad(lambda: float(t.data[0] ** 2), [("t", t)], h=1e-5)
    assert abs(grads["t"][0] - 6.0) <= 1e-6


def test_finite_diff_constant_function():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    grads = finite_diff_grad(lambda: 4.2, [("t", t)])
    np.testing.assert_allclose(grads["t"], 0.0)


def test_finite_diff_matches_backward_on_swiglu():
    from iamsb.nn_blocks import FfnParams, swiglu_ffn

    store = ParamStore(3)
    w1 = store.param("w1", (4, 6))
    w2 = store.param("w2", (4, 6))
    w3 = store.param("w3", (6, 4))
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    params = FfnParams(w1, w2, w3)

    def f():
        with nm.no_grad():
            return nm.tsum(swiglu_ffn(x, params)).item()

    bp = store.gradients(nm.tsum(swiglu_ffn(x, params)))
    fd = finite_diff_grad(f, store.items())
    assert max_relative_error(bp, fd) <= 1e-4


def test_every_op_matches_finite_differences():
    ok, lines = check_grad_ops(seed=7)
    assert ok, "\n".join(l for l in lines if "FAIL" in l)


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 5))
    a = nm.softmax(Tensor(x), axis=1).data
    b = nm.softmax(Tensor(x.copy()), axis=1).data
    assert (a == b).all()
    c = nm.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    d = nm.layer_norm(Tensor(x.copy()), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    assert (c == d).all()


def test_forward_ops_stay_finite():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(scale=50.0, size=(4, 4)))
    for out in (nm.softmax(x, axis=1), nm.silu(x), nm.softplus(x), nm.tanh(x),
                nm.huber(x, 0.1), nm.exp(nm.mul(x, 0.01))):
        assert np.isfinite(out.data).all()


def test_no_grad_blocks_graph():
    p = Tensor(np.ones(3), requires_grad=True)
    with nm.no_grad():
        out = nm.mul(p, 2.0)
    assert not out.requires_grad
    out2 = nm.mul(p, 2.0)
    assert out2.requires_grad


def test_stop_grad_cuts_gradient():
    store = ParamStore(0)
    p = store.param("p", (3,))
    grads = store.gradients(nm.tsum(nm.mul(nm.stop_grad(p), p)))
    np.testing.assert_allclose(grads["p"], p.data)  # only the live factor


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore(9)
    store.param("a.w", (3, 4))
    store.param("b.bias", (5,))
    store.param("scalar", ())
    path = tmp_path / "ckpt.bin"
    save_checkpoint(store.state_dict(), str(path))
    loaded = load_checkpoint(str(path))
    assert set(loaded) == {"a.w", "b.bias", "scalar"}
    for name, t in store.items():
        np.testing.assert_array_equal(loaded[name], t.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(NumericsError, match="checkpoint-format"):
        load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    store = ParamStore(0)
    store.param("w", (8, 8))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(store.state_dict(), str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(NumericsError, match="checkpoint-truncated"):
        load_checkpoint(str(path))


def test_checkpoint_shape_mismatch(tmp_path):
    store = ParamStore(0)
    store.param("w", (3, 3))
    path = tmp_path / "ckpt.bin"
    save_checkpoint({"w": np.zeros((2, 2))}, str(path))
    with pytest.raises(NumericsError, match="ckpt-shape"):
        store.load_state(load_checkpoint(str(path)))
