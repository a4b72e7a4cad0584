import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgca import tensor as T
from mgca.checks import primitive_checks
from mgca.tensor import DegenerateVectorError, GraphError, Tensor

from .oracles import cos, cross_entropy

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_cosine_examples():
    assert T.cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert T.cosine_similarity([1.0, 0.0], [1.0, 1.0]).item() == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_of_zero_vector_raises():
    with pytest.raises(DegenerateVectorError, match="degenerate vector"):
        T.cosine_similarity([0.0, 0.0], [1.0, 0.0])


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       st.floats(0.1, 100))
def test_cosine_bounded_symmetric_scale_invariant(u, v, c):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    s = T.cosine_similarity(u, v).item()
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(T.cosine_similarity(v, u).item(), abs=1e-12)
    assert s == pytest.approx(T.cosine_similarity(c * u, v).item(), abs=1e-9)
    assert s == pytest.approx(cos(u, v), abs=1e-9)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_constant_gradient_is_zero():
    x = Tensor(3.0, requires_grad=True)
    y = x * 0.0 + 5.0
    y.backward()
    assert x.grad == 0.0


def test_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = rng.normal(size=(4, 2))
    assert T.gradcheck(lambda: T.sum(T.tanh(a @ b) * w), [a, b], h=1e-5) < 1e-6


@pytest.mark.parametrize("check", primitive_checks(), ids=lambda c: c.name)
def test_primitive_gradients(check):
    assert check.ok, f"{check.name}: {check.error:.2e}"


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(2.0, requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    assert x.grad is None or x.grad == 0.0


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(1.0).backward()


def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_cross_entropy_examples():
    assert T.softmax_cross_entropy(np.zeros(5), 3).item() == pytest.approx(math.log(5), abs=1e-12)
    assert T.softmax_cross_entropy([100.0, 0.0, 0.0], 0).item() == pytest.approx(0.0, abs=1e-40)
    assert T.softmax_cross_entropy([1.0, 2.0, 3.0], 1).item() == pytest.approx(1.40760596, abs=1e-8)
    assert T.softmax_cross_entropy([1.0, 2.0, 3.0], 1).item() == pytest.approx(
        cross_entropy([1.0, 2.0, 3.0], 1), abs=1e-14)


def test_cross_entropy_stable_for_large_logits():
    loss = T.softmax_cross_entropy([1000.0, 999.0, -1000.0], 1).item()
    assert loss == pytest.approx(math.log1p(math.e), abs=1e-12)


def test_cross_entropy_candidate_mask():
    logits = np.array([[1.0, 5.0, 2.0, 3.0]])
    keep = np.array([[True, False, True, True]])
    got = T.softmax_cross_entropy(logits, [2], keep).data[0]
    assert got == pytest.approx(cross_entropy([1.0, 2.0, 3.0], 1), abs=1e-14)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(z):
    s = T.softmax(Tensor(z), axis=-1).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


def test_broadcast_gradient_reduces_to_operand_shape():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    T.sum(a * b).backward()
    assert b.grad.shape == (3,)
    assert np.all(b.grad == 4.0)


def test_gather_rows_accumulates_repeated_indices():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    T.sum(T.gather_rows(table, [1, 1, 2])).backward()
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])
    with pytest.raises(IndexError):
        T.gather_rows(table, [3])


def test_dropout_identity_without_rng_and_scaled_with_rng():
    x = Tensor(np.ones((100, 100)))
    assert T.dropout(x, 0.5, None) is x or np.array_equal(T.dropout(x, 0.5, None).data, x.data)
    y = T.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_layer_norm_zero_mean_unit_variance():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 8)) * 3 + 2)
    y = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1, atol=1e-9)
