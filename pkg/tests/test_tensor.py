import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from t2v import tensor as T
from t2v.tensor import Tensor, TensorError, backward, finite_diff_check, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def test_chain_rule_scalar():
    x = leaf(3.0)
    y = x * x
    backward(y)
    assert x.grad == pytest.approx(6.0)


def test_shared_subexpression_accumulates():
    x = leaf([1.0, 2.0])
    y = x * 2.0
    z = (y * y + y).sum()  # dz/dx = (2y + 1) * 2
    backward(z)
    np.testing.assert_allclose(x.grad, (2 * np.array([2.0, 4.0]) + 1) * 2)


def test_backward_requires_scalar_and_tracking():
    with pytest.raises(TensorError):
        backward(leaf([1.0, 2.0]) * 2.0)
    with pytest.raises(TensorError):
        backward(Tensor(np.ones(())))


def test_graph_released_after_backward():
    x = leaf(2.0)
    y = x * x
    backward(y)
    with pytest.raises(TensorError):
        backward(y)


def test_no_grad_records_nothing():
    x = leaf(2.0)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_elementwise_examples():
    a = Tensor(np.array([1.0, 2.0], np.float32))
    b = Tensor(np.array([3.0, 4.0], np.float32))
    np.testing.assert_array_equal(T.elementwise("add", a, b).data, [4, 6])
    np.testing.assert_array_equal(T.elementwise("mul", a, b).data, [3, 8])
    np.testing.assert_allclose(T.elementwise("silu", Tensor(np.zeros(1, np.float32))).data, [0.0])


def test_domain_errors():
    with pytest.raises(TensorError):
        T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))
    with pytest.raises(TensorError):
        T.sqrt(Tensor(np.array([-1.0])))
    with pytest.raises(TensorError):
        T.exp(Tensor(np.array([1000.0])))
    with pytest.raises(TensorError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(TensorError):
        T.reduce("sum", Tensor(np.ones((0, 3))), axis=0)


def test_matmul_and_reduce_values():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
    x = Tensor(a)
    assert T.reduce("sum", x).item() == 15
    assert T.reduce("mean", x).item() == 2.5
    np.testing.assert_array_equal(T.reduce("max", x, axis=1).data, [2, 5])


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    x = np.array([[1000.0, 1001.0, 1002.0], [-3.0, 0.0, 3.0]])
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(p[0], T.softmax(Tensor(x[0] - 1000.0)).data, rtol=1e-12)


RNG = np.random.default_rng(0)
W32 = Tensor(RNG.standard_normal((3, 2)))
C43 = Tensor(RNG.standard_normal((4, 3)))
C34 = Tensor(RNG.standard_normal((3, 4)))

GRAD_CASES = {
    "add": lambda x: T.add(x, x * 0.5 + 1.0),
    "sub": lambda x: T.sub(x * x, x),
    "mul": lambda x: T.mul(x, x + 2.0),
    "div": lambda x: T.div(x, x * x + 1.0),
    "silu": T.silu,
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "log": lambda x: T.log(x * x + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 1.0),
    "power": lambda x: T.power(x * x + 1.0, 1.5),
    "matmul": lambda x: T.matmul(x, W32),
    "sum": lambda x: T.reduce("sum", x * x, axis=1),
    "mean": lambda x: T.reduce("mean", x * x, axis=0),
    "max": lambda x: T.reduce("max", x, axis=1),
    "softmax": lambda x: T.softmax(x, axis=-1) * C43,
    "reshape": lambda x: T.reshape(x, (3, 4)) * C34,
    "transpose": lambda x: T.transpose(x) * C34,
    "getitem": lambda x: x[1:3, ::2] * 3.0,
    "gather": lambda x: x[np.array([0, 0, 2])] * 2.0,
    "concat": lambda x: T.concat([x, x * x], axis=1),
    "where": lambda x: T.where(np.array([[True, False, True]]), x * 2.0, x * x),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_difference(name):
    x = np.random.default_rng(1).standard_normal((4, 3))
    if name == "max":
        x[:, 0] += 3.0  # keep the argmax away from ties
    assert finite_diff_check(GRAD_CASES[name], x) < 1e-3


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
def test_sum_gradient_is_ones(arr):
    x = Tensor(arr, requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones_like(arr))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_broadcast_add_gradient_sums_over_broadcast_axes(m, n, k):
    a = Tensor(np.ones((m, 1, n)), requires_grad=True)
    b = Tensor(np.ones((k, 1)), requires_grad=True)
    backward(T.add(a, b).sum())
    np.testing.assert_array_equal(a.grad, np.full((m, 1, n), float(k)))
    np.testing.assert_array_equal(b.grad, np.full((k, 1), float(m * n)))


def test_float32_by_default():
    assert (Tensor([1.0, 2.0]) * 2).dtype == np.float32


def test_batch_invariant_matmul():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((37, 64)).astype(np.float32)
    b = rng.standard_normal((64, 48)).astype(np.float32)
    full = T.matmul(Tensor(a), Tensor(b)).data
    rows = np.concatenate([T.matmul(Tensor(a[i:i + 1]), Tensor(b)).data for i in range(37)])
    np.testing.assert_array_equal(full, rows)
