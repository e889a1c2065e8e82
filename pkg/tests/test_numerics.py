import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import check_model, check_op, layer_cases
from sparsemerge.errors import DimensionError
from sparsemerge.numerics import GradientTape, Rng, as_matrix, init_matrix, matmul, softmax


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_as_matrix_rejects_vectors():
    with pytest.raises(DimensionError):
        as_matrix(np.zeros(3))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("op", [c[0] for c in layer_cases(0)])
def test_layer_gradients(op, seed):
    name, build, inputs, scalar = next(c for c in layer_cases(seed) if c[0] == op)
    assert check_op(build, inputs, seed, scalar) < 1e-4


def test_model_gradient():
    assert check_model(0) < 1e-4


def test_tape_shape_checks():
    tape = GradientTape()
    a = tape.param("a", np.zeros((2, 3)), True)
    with pytest.raises(DimensionError):
        tape.add(a, tape.const(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        tape.matmul(a, tape.const(np.zeros((2, 2))))
    with pytest.raises(DimensionError):
        tape.attention(tape.const(np.zeros((1, 2, 5))), 2)


def test_unused_param_gets_zero_grad():
    tape = GradientTape()
    a = tape.param("a", np.ones((2, 2)), True)
    tape.param("b", np.ones((3,)), True)
    loss = tape.cross_entropy(a, np.array([0, 1]))
    grads = tape.backward(loss)
    assert np.array_equal(grads["b"], np.zeros(3))


def test_rng_is_deterministic_per_path():
    a = Rng(3, "x", 1).normal(5)
    b = Rng(3, "x", 1).normal(5)
    c = Rng(3, "x", 2).normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(Rng(3).child("x", 1).normal(5), a)


def test_rng_choice_without_replacement():
    pick = Rng(0).choice(10, 10, replace=False)
    assert sorted(pick.tolist()) == list(range(10))


def test_init_matrix_shape_and_scale():
    w = init_matrix(Rng(0), 64, 32)
    assert w.shape == (64, 32)
    assert 0.05 < w.std() < 0.3


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(xs):
    p = softmax(np.array([xs]))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
