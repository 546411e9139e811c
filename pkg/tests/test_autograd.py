import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melle import autograd as ag
from melle.autograd import NonFiniteError, Tensor, backward, no_grad
from melle.gradcheck import grad_check, relative_error
from melle.gradsuite import autodiff_checks
from melle.rng import RngState


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_square_at_three():
    x = leaf(3.0)
    g = backward(x * x)
    assert g[x] == pytest.approx(6.0)


def test_identity_matmul_gives_ones():
    x = leaf(np.arange(4.0).reshape(4, 1))
    g = backward(ag.matmul(Tensor(np.eye(4)), x).sum())
    np.testing.assert_array_equal(g[x], np.ones((4, 1)))


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        backward(leaf(np.ones(3)) * 2.0)


def test_unreached_leaf_gets_zero():
    a, b = leaf(np.ones(3)), leaf(np.ones(2))
    g = backward((a * 2.0).sum(), params=[a, b])
    np.testing.assert_array_equal(g[b], np.zeros(2))
    np.testing.assert_array_equal(g[a], 2 * np.ones(3))


def test_shared_subexpression_accumulates():
    x = leaf(2.0)
    y = x * x
    g = backward(y + y * 3.0)
    assert g[x] == pytest.approx(16.0)


def test_nan_is_an_error():
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        ag.log(Tensor(np.array([-1.0])))
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        ag.exp(Tensor(np.array([1e4])))


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with no_grad():
        y = x * 3.0
    assert y._backward is None and not y.requires_grad


def test_float32_graph_stays_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x * 0.5 + 1.0) / 3.0 - 2.0
    assert y.dtype == np.float32


def test_linear_gradcheck_is_exact():
    w = np.random.default_rng(0).standard_normal((3, 4))
    assert grad_check(lambda x: (x * w).sum(), [leaf(np.ones((3, 4)))]) <= 1e-9


def test_layer_norm_gradcheck_4_vector():
    g = np.random.default_rng(1)
    w = g.standard_normal(4)
    err = grad_check(lambda x: (ag.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))) * w).sum(),
                     [leaf(g.standard_normal(4))])
    assert err < 1e-6


@pytest.mark.parametrize("name,fn,inputs", autodiff_checks(0), ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradcheck(name, fn, inputs):
    assert grad_check(fn, inputs) < 1e-6, name


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_matmul_softmax_gradcheck_random_shapes(m, n, seed):
    g = np.random.default_rng(seed)
    a, b = leaf(g.standard_normal((m, 3))), leaf(g.standard_normal((3, n)))
    w = g.standard_normal((m, n))
    assert grad_check(lambda a, b: (ag.softmax(a @ b, axis=-1) * w).sum(), [a, b]) < 1e-6


@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(0, 1000))
def test_conv1d_gradcheck_random_shapes(t, cin, cout, k, seed):
    g = np.random.default_rng(seed)
    x, w, b = leaf(g.standard_normal((t, cin))), leaf(g.standard_normal((k, cin, cout))), leaf(g.standard_normal(cout))
    wt = g.standard_normal((t, cout))
    assert grad_check(lambda x, w, b: (ag.conv1d(x, w, b) * wt).sum(), [x, w, b]) < 1e-6


def test_conv1d_same_padding_reference():
    g = np.random.default_rng(2)
    x, w, b = g.standard_normal((7, 2)), g.standard_normal((5, 2, 3)), g.standard_normal(3)
    out = ag.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((2, 2), (0, 0)))
    ref = np.array([[sum(xp[t + k] @ w[k][:, o] for k in range(5)) + b[o] for o in range(3)] for t in range(7)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@given(st.integers(1, 5), st.integers(2, 8), st.integers(0, 1000))
def test_softmax_rows_sum_to_one(r, c, seed):
    x = np.random.default_rng(seed).standard_normal((r, c)) * 5
    np.testing.assert_allclose(ag.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-6)


@given(st.integers(1, 5), st.integers(2, 16), st.integers(0, 1000))
def test_layer_norm_moments(r, c, seed):
    x = np.random.default_rng(seed).standard_normal((r, c)) * 3 + 1
    y = ag.layer_norm(Tensor(x), Tensor(np.ones(c)), Tensor(np.zeros(c))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-5)
    var = y.var(-1)
    # eps=1e-5 inside the sqrt shrinks the variance slightly for tiny spreads
    np.testing.assert_allclose(var, x.var(-1) / (x.var(-1) + 1e-5), atol=1e-5)


def test_dropout_expectation_and_scaling():
    x = Tensor(np.ones(100_000))
    y = ag.dropout(x, 0.3, RngState(7)).data
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert abs(y.mean() - 1.0) < 0.01


def test_dropout_off_in_eval():
    x = Tensor(np.ones(10))
    assert ag.dropout(x, 0.5, RngState(0), training=False) is x


def test_relative_error_scaling():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) == pytest.approx(1e-9)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_getitem_backward_scatters_repeats():
    x = leaf(np.zeros(3))
    g = backward(x[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(g[x], [2.0, 0.0, 1.0])
