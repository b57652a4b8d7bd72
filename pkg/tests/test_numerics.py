import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbprompt import numerics as nx
from fedbprompt.model import masked_attention
from fedbprompt.numerics import NumericError, Tensor, backward, finite_diff_check


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    a = Tensor([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)


def test_matmul_hand_case():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[0], [1]])
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_matmul_matches_naive_loop(m, k, n, seed):
    # BLAS may fuse multiply-adds, so agreement is to rounding, not bitwise
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_random_3x3_against_naive():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)


def test_softmax_examples():
    np.testing.assert_array_equal(nx.softmax_rows(np.array([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(nx.softmax_rows(np.array([[0.0, -np.inf]])).data, [[1.0, 0.0]])
    # direct evaluation: exp(x_i) / sum_j exp(x_j)
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]])).data[0], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


def test_softmax_fully_masked_row_is_error():
    with pytest.raises(NumericError):
        nx.softmax_rows(np.array([[-np.inf, -np.inf], [0.0, 1.0]]))
    with pytest.raises(NumericError):
        nx.softmax_rows(Tensor(np.zeros((1, 2))), mask=np.array([[-np.inf, -np.inf]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 6), cols=st.integers(1, 9))
def test_softmax_rows_sum_to_one_and_masked_zero(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, (rows, cols))
    mask = np.where(rng.random((rows, cols)) < 0.4, -np.inf, 0.0)
    mask[:, rng.integers(cols)] = 0.0
    y = nx.softmax_rows(Tensor(x), mask).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y[np.isneginf(mask)] == 0.0)


def test_mask_values_other_than_zero_or_neginf_rejected():
    with pytest.raises(ValueError):
        nx.softmax_rows(Tensor(np.zeros((1, 2))), mask=np.array([[0.0, -1e30]]))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(nx.layer_norm(Tensor([[2.0, 2.0, 2.0]]), one, zero).data, np.zeros((1, 3)))
    y = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, (4, 16))
    y = nx.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    var = y.var(axis=1)
    expected = x.var(axis=1) / (x.var(axis=1) + nx.LN_EPS)
    np.testing.assert_allclose(var, expected, atol=1e-10)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_backward_linear_and_square():
    w = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    assert backward(w.sum())[w].tolist() == [1.0, 1.0, 1.0]
    v = Tensor(3.0, requires_grad=True)
    assert backward(v * v)[v] == 6.0


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_backward_skips_frozen_leaves():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    frozen = Tensor(np.full((2, 2), 3.0))
    grads = backward((w @ frozen).sum())
    assert w in grads and frozen not in grads


def test_gradient_accumulates_over_reuse():
    w = Tensor(2.0, requires_grad=True)
    g = backward(w * w * w + w)[w]
    assert g == 3 * 4 + 1


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([1e308]) * 10.0
    with pytest.raises(NumericError):
        Tensor([1.0]) / Tensor([0.0])


def _unary_cases():
    return {
        "gelu": nx.gelu,
        "relu_shifted": lambda t: nx.relu(t + 0.05),
        "sqrt_shifted": lambda t: nx.sqrt(t * t + 0.5),
        "log_softmax": nx.log_softmax,
        "softmax": nx.softmax_rows,
        "l2_normalize": nx.l2_normalize,
        "transpose": lambda t: nx.transpose(t, (1, 0)),
        "reshape": lambda t: nx.reshape(t, (-1,)),
        "slice": lambda t: t[1:, ::2],
        "gather": lambda t: t[np.array([0, 2, 0]), np.array([1, 1, 3])],
        "broadcast": lambda t: nx.broadcast_to(t, (2, 3, 4)),
        "mean_axis": lambda t: nx.mean(t, axis=1),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_ops_match_finite_differences(name):
    op = _unary_cases()[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    weights = rng.uniform(-1, 1, op(x).shape)

    def f():
        return (op(x) * weights).sum()

    assert finite_diff_check(f, [x]) < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "batched_matmul", "concat", "layer_norm"])
def test_binary_ops_match_finite_differences(name):
    rng = np.random.default_rng(len(name))
    a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4,)), requires_grad=True)
    if name == "add":
        op = lambda: a + b
    elif name == "sub":
        op = lambda: a - b
    elif name == "mul":
        op = lambda: a * b
    elif name == "div":
        b.data = rng.uniform(0.5, 1.5, (4,))
        op = lambda: a / b
    elif name == "matmul":
        b.data = rng.uniform(-1, 1, (4, 2))
        op = lambda: a @ b
    elif name == "batched_matmul":
        a.data = rng.uniform(-1, 1, (2, 3, 4))
        b.data = rng.uniform(-1, 1, (2, 4, 5))
        op = lambda: a @ b
    elif name == "concat":
        b.data = rng.uniform(-1, 1, (2, 4))
        op = lambda: nx.concat([a, b], axis=0)
    else:
        g = Tensor(rng.uniform(0.5, 1.5, (4,)), requires_grad=True)
        op = lambda: nx.layer_norm(a, g, b)
    weights = rng.uniform(-1, 1, op().shape)
    assert finite_diff_check(lambda: (op() * weights).sum(), [a, b]) < 1e-4


def test_finite_diff_check_quadratic_is_tight():
    x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
    assert finite_diff_check(lambda: (x * x * 2.0 + x).sum(), [x]) < 1e-8


def test_finite_diff_check_masked_attention_toy():
    rng = np.random.default_rng(5)
    q = Tensor(rng.uniform(-1, 1, (2, 5, 3)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (2, 5, 3)), requires_grad=True)
    v = Tensor(rng.uniform(-1, 1, (2, 5, 3)), requires_grad=True)
    mask = np.zeros((5, 5))
    mask[1, 3:] = mask[3:, 1] = -np.inf
    w = rng.uniform(-1, 1, (2, 5, 3))

    def f():
        out, _ = masked_attention(q, k, v, mask)
        return (out * w).sum()

    assert finite_diff_check(f, [q, k, v]) < 1e-4


def test_finite_diff_check_catches_corrupted_gradient():
    x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
    f = lambda: (x * x).sum()
    grads = backward(f())
    grads[x] = grads[x] + np.array([0.0, 0.05, 0.0])
    assert finite_diff_check(f, [x], grads=grads) > 1e-2
