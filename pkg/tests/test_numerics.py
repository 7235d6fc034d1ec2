import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2v import numerics as nx
from d2v.errors import ConfigError, NumericError, StateError
from d2v.frontends import conv_output_length
from d2v.numerics import Streams, Tensor

from conftest import wide


def test_softmax_of_equal_logits_is_uniform():
    out = nx.softmax(wide([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_matmul_identity(rng):
    a = wide(rng.standard_normal((3, 5)))
    np.testing.assert_array_equal(nx.matmul(wide(np.eye(3)), a).data, a.data)


def test_matmul_batched_matches_numpy(rng):
    a, b = rng.standard_normal((2, 4, 3, 5)), rng.standard_normal((5, 6))
    np.testing.assert_allclose(nx.matmul(wide(a), wide(b)).data, a @ b, atol=1e-12)


def test_conv1d_matches_direct_sum(rng):
    x, w = rng.standard_normal((2, 50, 3)), rng.standard_normal((4, 3, 5))
    out = nx.conv1d(wide(x), wide(w), stride=3).data
    T = (50 - 5) // 3 + 1
    ref = np.array([[[np.sum(x[b, t * 3: t * 3 + 5, :].T * w[c]) for c in range(4)] for t in range(T)]
                    for b in range(2)])
    assert out.shape == (2, T, 4)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_seven_layer_conv_stack_length():
    strides, kernels = (5, 2, 2, 2, 2, 2, 2), (10, 3, 3, 3, 3, 2, 2)
    x = Tensor(np.zeros((1, 16000, 1)), dtype=np.float64)
    n = 16000
    for s, k in zip(strides, kernels):
        x = nx.conv1d(x, Tensor(np.ones((1, 1, k)), dtype=np.float64), s)
        n = (n - k) // s + 1
    assert x.shape[1] == n == conv_output_length(16000, kernels, strides) == 49


@pytest.mark.parametrize("name,fn,shape", [
    ("gelu", nx.gelu, (3, 4)),
    ("softmax", lambda x: nx.softmax(x, axis=-1), (3, 4)),
    ("softmax0", lambda x: nx.softmax(x, axis=0), (3, 4)),
    ("mean", lambda x: nx.mean(x, axis=0), (3, 4)),
    ("variance", lambda x: nx.variance(x, axis=-1), (3, 4)),
    ("normalize_time", lambda x: nx.normalize(x, axis=-2), (5, 3)),
    ("normalize_feat", lambda x: nx.normalize(x, axis=-1, eps=1e-6), (5, 3)),
    ("transpose", lambda x: nx.transpose(x, (1, 0)), (3, 4)),
    ("reshape", lambda x: nx.reshape(x, (2, 6)), (3, 4)),
    ("gather", lambda x: nx.gather(x, [2, 0, 2], axis=0), (3, 4)),
    ("concat", lambda x: nx.concat([x, nx.scale(x, 2.0)], axis=1), (3, 4)),
])
def test_op_gradients_match_finite_differences(rng, name, fn, shape):
    x = wide(rng.standard_normal(shape))
    w = rng.standard_normal(fn(x).shape)

    def f(t):
        return nx.sum_(nx.mul(fn(t), Tensor(w, dtype=np.float64)))

    assert nx.grad_check(f, x, eps=1e-6) < 1e-7, name


def test_conv1d_and_embedding_gradients(rng):
    x = wide(rng.standard_normal((2, 23, 3)))
    w = rng.standard_normal((4, 3, 4))
    assert nx.grad_check(lambda t: nx.sum_(nx.gelu(nx.conv1d(x, t, 2))), wide(w)) < 1e-7
    assert nx.grad_check(lambda t: nx.sum_(nx.gelu(nx.conv1d(t, wide(w), 2))), x) < 1e-7
    table = wide(rng.standard_normal((6, 3)))
    ids = np.array([[0, 5, 5], [1, 2, 0]])
    assert nx.grad_check(lambda t: nx.sum_(nx.mul(nx.embedding(t, ids), nx.embedding(t, ids))), table) < 1e-7


def test_mask_rows_gradient(rng):
    x = wide(rng.standard_normal((2, 4, 3)))
    v = wide(rng.standard_normal(3))
    rows = np.array([[True, False, True, False], [False, False, False, True]])
    f = lambda t: nx.sum_(nx.gelu(nx.mask_rows(t, rows, v)))
    assert nx.grad_check(f, x) < 1e-7
    assert nx.grad_check(lambda t: nx.sum_(nx.gelu(nx.mask_rows(x, rows, t))), v) < 1e-7


def test_backward_visits_ops_in_reverse_order(rng):
    x = wide(rng.standard_normal(3))
    a = nx.gelu(x)
    b = nx.scale(a, 2.0)
    c = nx.sum_(b)
    assert nx.backward(c) == ["sum", "scale", "gelu"]
    assert x.grad is not None and x.grad.shape == x.shape


def test_second_backward_on_same_graph_is_an_error(rng):
    x = wide(rng.standard_normal(3))
    loss = nx.sum_(nx.gelu(x))
    nx.backward(loss)
    with pytest.raises(StateError):
        nx.backward(loss)


def test_backward_needs_a_scalar(rng):
    with pytest.raises(StateError):
        nx.backward(nx.gelu(wide(rng.standard_normal(3))))


def test_shared_subexpression_accumulates(rng):
    x = wide(rng.standard_normal(4))
    y = nx.mul(x, x)
    loss = nx.sum_(nx.add(y, y))
    nx.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)


def test_no_grad_records_nothing(rng):
    x = wide(rng.standard_normal(3))
    with nx.no_grad():
        y = nx.sum_(nx.gelu(x))
    assert not y.requires_grad
    with pytest.raises(StateError):
        nx.backward(y)


def test_non_finite_results_raise_numeric_error():
    with pytest.raises(NumericError, match="normalize"):
        nx.normalize(wide(np.ones((4, 2))), axis=0)
    with pytest.raises(NumericError):
        Tensor([np.inf])
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="scale"):
        nx.scale(wide([1e308]), 1e10)


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        nx.add(wide(np.ones((2, 3))), wide(np.ones((3, 2))))
    with pytest.raises(ConfigError):
        nx.matmul(wide(np.ones((2, 3))), wide(np.ones((2, 3))))
    with pytest.raises(ConfigError):
        nx.conv1d(wide(np.ones((1, 3, 1))), wide(np.ones((1, 1, 4))), 1)


def test_trailing_axis_broadcast_sums_gradient(rng):
    a = wide(rng.standard_normal((2, 3, 4)))
    b = wide(rng.standard_normal(4))
    nx.backward(nx.sum_(nx.add(a, b)))
    np.testing.assert_allclose(b.grad, np.full(4, 6.0))


def test_leaf_data_is_read_only():
    t = wide([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_streams_are_named_and_reproducible():
    s = Streams(7)
    a = s.generator("mask", 3).random(4)
    assert np.array_equal(a, Streams(7).generator("mask", 3).random(4))
    assert not np.array_equal(a, s.generator("mask", 4).random(4))
    assert not np.array_equal(a, Streams(8).generator("mask", 3).random(4))
    assert np.array_equal(s.child("mask").generator(3).random(4), a)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 5)),
              elements=st.floats(-100, 100, allow_nan=False)),
       st.sampled_from([0, 1]))
def test_normalize_postconditions(x, axis):
    var = x.var(axis=axis)
    if np.any(var < 1e-6):
        return
    y = nx.normalize(Tensor(x, dtype=np.float64), axis=axis).data
    assert np.all(np.abs(y.mean(axis=axis)) < 1e-9)
    np.testing.assert_allclose(y.var(axis=axis), 1.0, atol=1e-9)


def test_grad_check_detects_a_wrong_gradient(rng):
    def bad(t):
        return nx.make_op("bad", t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,))

    x = wide(rng.standard_normal(4))
    assert nx.grad_check(lambda t: nx.sum_(bad(t)), x) > 1e-3
