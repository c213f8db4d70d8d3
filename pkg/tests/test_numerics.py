import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xferlab import numerics as nx
from xferlab.numerics import ContractError, DimensionError, Tape, Tensor


def leaf(v):
    return Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)


# matmul ---------------------------------------------------------------------

def test_matmul_identity_and_small_case():
    B = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(nx.matmul(np.eye(3), B).data, B)
    out = nx.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(nx.matmul(a, b).data - ref)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax --------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(np.zeros(2)).data, [0.5, 0.5], atol=1e-15)
    big = nx.softmax(np.array([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(nx.softmax(np.array([1.0, 2.0, 3.0])).data,
                               [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_is_a_shift_invariant_distribution(v, c):
    p = nx.softmax(v).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12
    assert np.max(np.abs(nx.softmax(v + c).data - p)) < 1e-12


# layer norm -----------------------------------------------------------------

def test_layer_norm_examples(rng):
    one, zero = np.ones(4), np.zeros(4)
    assert np.array_equal(nx.layer_norm(np.full(4, 3.0), one, zero).data, zero)
    out = nx.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0).data
    assert np.array_equal(out, [1.0, -1.0])
    v = rng.normal(size=10) * 5 + 2
    assert abs(nx.layer_norm(v, np.ones(10), np.full(10, 0.7)).data.mean() - 0.7) < 1e-10


def test_layer_norm_uses_biased_variance():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    expected = (v - v.mean()) / math.sqrt(v.var() + 1e-5)
    assert np.allclose(nx.layer_norm(v, np.ones(4), np.zeros(4)).data, expected, atol=1e-15)


# gelu -----------------------------------------------------------------------

def test_gelu_examples():
    assert nx.gelu(np.array(0.0)).data == 0.0
    assert abs(nx.gelu(np.array(10.0)).data - 10.0) < 1e-6
    assert abs(float(nx.gelu(np.array(1.0)).data) - 0.8411919906) < 1e-10


def test_gelu_does_not_modify_its_input():
    x = np.array([-1.0, 0.5, 2.0])
    keep = x.copy()
    nx.gelu(Tensor(x))
    assert np.array_equal(x, keep)


# cross entropy --------------------------------------------------------------

def test_cross_entropy_examples():
    assert abs(nx.cross_entropy(np.zeros(4), 0).item() - math.log(4)) < 1e-12
    got = nx.cross_entropy(np.array([10.0, -10.0]), 0).item()
    assert abs(got - 2.0611536e-9) < 1e-15
    losses = [nx.cross_entropy(np.array([m, 0.0, 0.0]), 0).item() for m in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy(np.zeros(3), 3)


# backward -------------------------------------------------------------------

def test_backward_polynomial():
    x = leaf(3.0)
    with Tape() as tape:
        y = nx.mul(x, x)
    tape.backward(y)
    assert x.grad == 6.0


def test_backward_constant_function_has_zero_gradient(rng):
    x = leaf(rng.normal(size=5))
    with Tape() as tape:
        y = nx.total(nx.softmax(x))
    tape.backward(y)
    assert np.max(np.abs(x.grad)) < 1e-15


def test_backward_accumulates_until_zeroed():
    x = leaf(2.0)
    for _ in range(2):
        with Tape() as tape:
            y = nx.mul(x, 3.0)
        tape.backward(y)
    assert x.grad == 6.0
    nx.zero_grad([x])
    assert x.grad is None


def test_backward_needs_scalar_seed():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = nx.mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_gradients_of_composite_match_finite_differences(rng):
    W = rng.normal(size=(4, 3))
    g, b = rng.normal(size=4), rng.normal(size=4)

    def f(v):
        h = nx.layer_norm(nx.gelu(nx.matmul(Tensor(v.reshape(2, 4)), Tensor(W))), Tensor(g[:3]),
                          Tensor(b[:3]))
        return nx.cross_entropy(nx.softmax(h, axis=-1), np.array([0, 2])).item()

    v0 = rng.normal(size=8)
    x = leaf(v0.reshape(2, 4))
    with Tape() as tape:
        h = nx.layer_norm(nx.gelu(nx.matmul(x, W)), Tensor(g[:3]), Tensor(b[:3]))
        loss = nx.cross_entropy(nx.softmax(h, axis=-1), np.array([0, 2]))
    tape.backward(loss)
    fd = nx.finite_difference_gradient(f, v0, np.arange(8), h=1e-6)
    np.testing.assert_allclose(x.grad.reshape(-1), fd, rtol=1e-6, atol=1e-9)


def test_non_finite_results_are_rejected_while_recording():
    x = leaf([-1.0])
    with Tape(), pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        nx.sqrt(x)


# finite differences -----------------------------------------------------------

def test_finite_difference_examples():
    theta = np.array([2.0, -1.0])
    est = nx.finite_difference_gradient(lambda t: float(t @ t), theta, [0], h=1e-5)
    assert abs(est[0] - 4.0) < 1e-8
    lin = nx.finite_difference_gradient(lambda t: 3.0 * t[1] + 1.0, theta, [1], h=1e-5)
    assert abs(lin[0] - 3.0) < 1e-9
    assert np.array_equal(theta, [2.0, -1.0])


def test_finite_difference_rejects_bad_arguments():
    with pytest.raises(ValueError):
        nx.finite_difference_gradient(lambda t: 0.0, np.zeros(2), [0], h=0.0)
    with pytest.raises(IndexError):
        nx.finite_difference_gradient(lambda t: 0.0, np.zeros(2), [2])
