import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vibe import autodiff as ad
from vibe.autodiff import DimensionError, GraphError, NonFiniteError, Tensor

import oracles

finite = st.floats(-50, 50, allow_nan=False, width=64)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), grad, np.float64)


# -- matmul -------------------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal((t64(np.eye(2)) @ t64(a)).data, a)


def test_matmul_hand_example():
    out = t64([[1, 2], [3, 4]]) @ t64([[1], [1]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_zero_annihilates():
    a = np.random.default_rng(0).standard_normal((3, 3))
    assert not (t64(np.zeros((3, 3))) @ t64(a)).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        t64(np.ones((2, 3))) @ t64(np.ones((4, 5)))


def test_matmul_random_vs_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    np.testing.assert_allclose((t64(a) @ t64(b)).data, oracles.matmul(a.tolist(), b.tolist()), rtol=1e-12)


def test_matmul_batched_gradients():
    rng = np.random.default_rng(2)
    w = t64(rng.standard_normal((3, 4)))
    x = t64(rng.standard_normal((2, 5, 3)))
    assert ad.grad_check(lambda a: ((a @ w) ** 2).sum(), x) < 1e-7
    assert ad.grad_check(lambda b: ((x @ b) ** 2).sum(), w) < 1e-7
    y = t64(rng.standard_normal((2, 4, 5)))
    assert ad.grad_check(lambda b: ((w @ b) ** 2).sum(), y) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associativity(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((n, p))
    left = ((t64(a) @ t64(b)) @ t64(c)).data
    right = (t64(a) @ (t64(b) @ t64(c))).data
    np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-10 * np.abs(left).max())
    f32 = [Tensor(x) for x in (a, b, c)]
    left32 = ((f32[0] @ f32[1]) @ f32[2]).data
    right32 = (f32[0] @ (f32[1] @ f32[2])).data
    np.testing.assert_allclose(left32, right32, rtol=1e-4, atol=1e-4 * np.abs(left32).max())


# -- softmax --------------------------------------------------------------------------------------

def test_softmax_constant_is_uniform():
    np.testing.assert_allclose(ad.softmax(t64([2.0, 2.0, 2.0, 2.0])).data, 0.25)


def test_softmax_closed_form():
    np.testing.assert_allclose(ad.softmax(t64([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-12)


def test_softmax_large_logits_do_not_overflow():
    out = ad.softmax(t64([1000.0, 0.0])).data
    assert out[0] == 1.0 and 0 <= out[1] < 1e-300


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite),
       st.integers(0, 2))
def test_softmax_sums_to_one(x, axis):
    axis = axis % x.ndim
    out = ad.softmax(t64(x), axis=axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_sum_has_zero_gradient():
    x = t64([0.3, -1.2, 2.0, 0.1], grad=True)
    ad.backward(ad.softmax(x).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


# -- layer norm -------------------------------------------------------------------------------------

def test_layer_norm_standardises():
    out = ad.layer_norm(t64([1.0, 2.0, 3.0]), t64(np.ones(3)), t64(np.zeros(3))).data
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-4  # eps=1e-5 shrinks the variance slightly


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(t64([[4.0, 4.0, 4.0]]), t64(np.ones(3)), t64(np.zeros(3))).data
    assert np.array_equal(out, np.zeros((1, 3)))


def test_layer_norm_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    g, b = t64(rng.standard_normal(4)), t64(rng.standard_normal(4))
    w = rng.standard_normal(4)
    x = t64(rng.standard_normal(4))
    assert ad.grad_check(lambda v: (ad.layer_norm(v, g, b) * t64(w)).sum(), x) < 1e-6
    assert ad.grad_check(lambda v: (ad.layer_norm(x, v, b) * t64(w)).sum(), g) < 1e-6


# -- elementwise ops under grad_check ---------------------------------------------------------------

@pytest.mark.parametrize("fn", [
    lambda x: ad.exp(x).sum(),
    lambda x: ad.log(x * x + 1.0).sum(),
    lambda x: ad.sqrt(x * x + 1.0).sum(),
    lambda x: ad.tanh(x).sum(),
    lambda x: ad.gelu(x).sum(),
    lambda x: (x ** 3).sum(),
    lambda x: (x / (x * x + 2.0)).sum(),
    lambda x: ad.mean(x * x, axis=1).sum(),
    lambda x: (ad.transpose(x) @ x).sum(),
    lambda x: (ad.concat([x, x * 2.0], axis=0) ** 2).sum(),
    lambda x: (ad.stack([x, -x], axis=1) ** 2).sum(),
    lambda x: (x[1:, ::2] ** 2).sum() + (x[[0, 0, 2]] ** 2).sum(),
    lambda x: (ad.masked_fill(x, np.eye(3, dtype=bool), -5.0) ** 2).sum(),
    lambda x: (ad.softmax(x, axis=0) * ad.softmax(x, axis=1)).sum(),
], ids=["exp", "log", "sqrt", "tanh", "gelu", "pow", "div", "mean", "transpose", "concat", "stack",
        "getitem", "masked_fill", "softmax"])
def test_op_gradients(fn):
    x = t64(np.random.default_rng(4).standard_normal((3, 3)))
    assert ad.grad_check(fn, x) < 1e-5


def test_causal_conv1d_gradients():
    rng = np.random.default_rng(5)
    x, k = t64(rng.standard_normal((6, 2))), t64(rng.standard_normal(3))
    w = t64(rng.standard_normal((6, 2)))
    assert ad.grad_check(lambda v: (ad.causal_conv1d(v, k) * w).sum(), x) < 1e-7
    assert ad.grad_check(lambda v: (ad.causal_conv1d(x, v) * w).sum(), k) < 1e-7


def test_broadcast_gradients_reduce_to_input_shape():
    a = t64(np.ones((3, 4)), grad=True)
    b = t64(np.ones(4), grad=True)
    ad.backward((a * b + b).sum())
    assert b.grad.shape == (4,) and np.allclose(b.grad, 6.0)


# -- backward ---------------------------------------------------------------------------------------

def test_square_gradient():
    x = t64(3.0, grad=True)
    ad.backward(x * x)
    assert x.grad == 6.0


def test_backward_twice_errors():
    x = t64([1.0, 2.0], grad=True)
    y = (x * x).sum()
    ad.backward(y)
    with pytest.raises(GraphError, match="already"):
        ad.backward(y)


def test_backward_into_unreset_leaf_errors():
    x = t64([1.0, 2.0], grad=True)
    ad.backward((x * x).sum())
    with pytest.raises(GraphError, match="not reset"):
        ad.backward((x * 3.0).sum())
    x.zero_grad()
    ad.backward((x * 3.0).sum())
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_backward_requires_scalar_root():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(GraphError, match="scalar"):
        ad.backward(x * 2.0)


def test_every_reachable_parameter_gets_matching_gradient():
    rng = np.random.default_rng(6)
    params = [t64(rng.standard_normal(s), grad=True) for s in [(3, 4), (4,), (4, 2)]]
    x = t64(rng.standard_normal((5, 3)))
    y = ad.tanh(x @ params[0] + params[1]) @ params[2]
    leaves = ad.backward((y * y).sum())
    assert {id(p) for p in params} <= {id(leaf) for leaf in leaves}
    for p in params:
        assert p.grad.shape == p.shape


def test_no_grad_builds_no_graph():
    x = t64([1.0], grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        ad.log(t64([-1.0]))
    with pytest.raises(NonFiniteError):
        t64([1.0]) / t64([0.0])


# -- grad_check --------------------------------------------------------------------------------------

def test_grad_check_quadratic_form():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 5))
    q = t64(a @ a.T)
    x = t64(rng.standard_normal((5, 1)))
    assert ad.grad_check(lambda v: (ad.transpose(v) @ q @ v).sum(), x, h=1e-5) < 1e-8


def test_grad_check_catches_wrong_backward_rule():
    def bad_square(a):
        out = a.data * a.data
        return ad._make(out, (a,), lambda g: (g * a.data,), "bad_square")  # should be 2*a*g

    x = t64(np.random.default_rng(8).uniform(0.5, 2.0, 4))
    assert ad.grad_check(lambda v: bad_square(v).sum(), x) > 1e-2


def test_grad_check_reports_offending_coordinate():
    x = t64([0.5, 1e-6])
    with pytest.raises(NonFiniteError, match=r"\(1,\)"):
        ad.grad_check(lambda v: ad.log(v).sum(), x, h=1e-5)


def test_grad_check_coordinate_subset():
    x = t64(np.arange(6.0).reshape(2, 3))
    assert ad.grad_check(lambda v: (v ** 2).sum(), x, coords=[(0, 1), (1, 2)]) < 1e-8
