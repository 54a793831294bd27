import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdiff.errors import DimensionError, NumericError, ValidationError
from groupdiff.tensor import (Tensor, concat, gelu, grad_check, layer_norm,
                              matmul, no_grad, scaled_dot_attention, sigmoid,
                              silu, softmax, take_rows)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().data.item()
        flat[i] = orig - h
        down = f().data.item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("op", [
    lambda x: (x * 3.0 + 1.0).sum(),
    lambda x: (x * x).mean(),
    lambda x: (x / 2.5).sum(),
    lambda x: (x ** 3).sum(),
    lambda x: gelu(x).sum(),
    lambda x: silu(x).sum(),
    lambda x: sigmoid(x).sum(),
    lambda x: softmax(x, axis=-1).reshape(-1)[3] * 1.0,
    lambda x: layer_norm(x).sum(),
    lambda x: (x.reshape(6, 2) @ Tensor(np.arange(2.0).reshape(2, 1) + 1.0)).sum(),
    lambda x: x.transpose(1, 0).sum(axis=1).mean(),
    lambda x: x[1:, :2].sum(),
])
def test_op_gradients_match_central_differences(op):
    x = Tensor(np.random.default_rng(3).standard_normal((3, 4)), requires_grad=True)
    x.zero_grad()
    y = op(x)
    y.backward()
    numeric = numeric_grad(lambda: op(x), x)
    assert np.allclose(x.grad, numeric, atol=1e-6)


def test_broadcast_add_grad():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 1, 4)), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (2, 3, 4)
    assert b.grad.shape == (1, 1, 4)
    assert np.all(b.grad == 6.0)


def test_matmul_batched_grad_shapes():
    a = Tensor(np.random.default_rng(0).standard_normal((5, 3, 4)), requires_grad=True)
    w = Tensor(np.random.default_rng(1).standard_normal((4, 2)), requires_grad=True)
    (a @ w).sum().backward()
    assert a.grad.shape == (5, 3, 4)
    assert w.grad.shape == (4, 2)
    # grad wrt w sums over the batch
    assert np.allclose(w.grad, np.einsum("bij,bik->jk", a.data, np.ones((5, 3, 2))))


def test_matmul_requires_2d():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones(3)))


def test_take_rows_scatter_adds():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    idx = np.array([1, 1, 3])
    take_rows(table, idx).sum().backward()
    assert np.allclose(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_concat_grad_splits():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    concat([a, b], axis=0).sum().backward()
    assert a.grad.shape == (2, 2) and b.grad.shape == (3, 2)


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 7)) * 30)
    s = softmax(x).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_max_subtraction_is_stable():
    x = Tensor(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))
    s = softmax(x).data
    assert np.all(np.isfinite(s))
    assert np.allclose(s[0], [0.5, 0.5])


def test_dtype_preserved_with_scalar_constants():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (x + 1.0).dtype == np.float32
    assert (x * 2.0).dtype == np.float32
    assert (x / 2.0).dtype == np.float32


# -- scaled_dot_attention -------------------------------------------------------

def test_attention_single_key_forces_weight_one():
    q = Tensor(np.array([[2.0]]))
    k = Tensor(np.array([[-1.0]]))
    v = Tensor(np.array([[3.0]]))
    assert np.allclose(scaled_dot_attention(q, k, v).data, [[3.0]])


def test_attention_identical_keys_average_values():
    q = Tensor(np.array([[1.0], [-2.0]]))
    k = Tensor(np.array([[5.0], [5.0]]))
    v = Tensor(np.array([[0.0], [2.0]]))
    assert np.allclose(scaled_dot_attention(q, k, v).data, [[1.0], [1.0]])


def test_attention_matches_hand_softmax_oracle():
    # S=2, d=1, q=k=v=[[1],[0]]: row 0 weights softmax([1,0]), row 1 uniform.
    q = Tensor(np.array([[1.0], [0.0]]))
    out = scaled_dot_attention(q, q, q).data
    w00 = math.exp(1.0) / (math.exp(1.0) + 1.0)
    assert np.allclose(out, [[w00], [0.5]], atol=1e-12)


def test_attention_rows_stochastic_and_convex():
    rng = np.random.default_rng(9)
    q = Tensor(rng.standard_normal((6, 3)))
    v = Tensor(rng.standard_normal((6, 3)))
    out, w = scaled_dot_attention(q, q, v, return_weights=True)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out.data.min(axis=0) >= v.data.min(axis=0) - 1e-12)
    assert np.all(out.data.max(axis=0) <= v.data.max(axis=0) + 1e-12)


def test_attention_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))),
                             Tensor(np.ones((2, 3))))


def test_attention_nonfinite_raises():
    bad = np.ones((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        scaled_dot_attention(Tensor(bad), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))


def test_attention_gradients():
    rng = np.random.default_rng(4)
    q = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    v = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    err = grad_check(lambda: scaled_dot_attention(q, k, v).sum(), [q, k, v], h=1e-5)
    assert err <= 1e-6


# -- grad_check harness ----------------------------------------------------------

def test_grad_check_quadratic():
    x = Tensor(np.array([3.0]), requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x], h=1e-5) <= 1e-9


def test_grad_check_constant_function():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = Tensor(np.array(4.0))
    assert grad_check(lambda: c * 1.0, [x], h=1e-4) == 0.0


def test_grad_check_rejects_bad_step():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValidationError):
        grad_check(lambda: (x * x).sum(), [x], h=0.0)


def test_grad_check_nonfinite_function():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: x / 0.0, [x])


# -- determinism & finiteness ----------------------------------------------------

def test_bitwise_determinism_of_forward_chain():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        y = softmax(x @ x.transpose(1, 0)) @ x
        out = gelu(y).sum()
        out.backward()
        return out.data.copy(), x.grad.copy()
    (v1, g1), (v2, g2) = run(), run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def test_assert_finite():
    t = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericError):
        t.assert_finite("test")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_attention_row_sums_property(s, d, extra):
    rng = np.random.default_rng(s * 100 + d * 10 + extra)
    q = Tensor(rng.standard_normal((s, d)) * extra)
    _, w = scaled_dot_attention(q, q, q, return_weights=True)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
