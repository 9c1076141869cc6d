import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_sc import tensor as T
from moe_sc.tensor import Tensor, grad_check


def p64(rng, *shape):
    return T.parameter(rng.standard_normal(shape))


def central_diff(f, x, eps=1e-6):
    """Independent oracle: numeric gradient of scalar f at array x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    a_val, b_val = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    a, b = T.parameter(a_val.copy()), T.parameter(b_val.copy())
    ((a @ b) * Tensor(w)).sum().backward()
    num_a = central_diff(lambda x: float(((x @ b_val) * w).sum()), a_val.copy())
    num_b = central_diff(lambda x: float(((a_val @ x) * w).sum()), b_val.copy())
    np.testing.assert_allclose(a.grad, num_a, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(b.grad, num_b, rtol=1e-4, atol=1e-8)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([2.0, 1.0, T.sentinel()])).data
    e = math.e
    np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1), 0.0], atol=1e-6)
    assert out[2] == 0.0
    assert T.softmax(Tensor([5.0])).data.tolist() == [1.0]


def test_softmax_all_excluded_raises():
    with pytest.raises(T.InvalidGateError):
        T.softmax(Tensor([T.sentinel(), T.sentinel()]))
    with pytest.raises(T.InvalidGateError):
        T.softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    x = np.array(xs)
    p = T.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.all(p >= 0)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, p, atol=1e-6)


def test_softmax_weights_equal_row_removal():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5)
    w = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    p = T.softmax(Tensor(x), weights=Tensor(w)).data
    ref = T.softmax(Tensor(x[w == 1])).data
    np.testing.assert_allclose(p[w == 1], ref, rtol=1e-12)
    assert np.all(p[w == 0] == 0)


def test_two_path_accumulation():
    # y = x*x + 3x feeds x into two consumers; dy/dx = 2x + 3
    x = T.parameter(np.array(2.0))
    y = x * x + x * 3.0
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_tape_visits_each_node_once():
    x = T.parameter(np.array([1.0, 2.0]))
    h = T.exp(x)
    y = (h * h + h).sum()
    tape = T.ComputationTape.from_output(y)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_grad_check_sum_of_squares():
    rng = np.random.default_rng(1)
    x = p64(rng, 4, 3)
    assert grad_check(lambda: (x * x).sum(), [x], max_coords=None) < 1e-5


def test_grad_check_constant():
    x = T.parameter(np.ones(3))
    assert grad_check(lambda: (x * 0.0).sum() + 2.0, [x], max_coords=None) == 0.0


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "sigmoid": lambda a, b: T.sigmoid(a) * b,
    "gelu": lambda a, b: T.gelu(a) * b,
    "relu": lambda a, b: T.relu(a + 0.05) * b,
    "log": lambda a, b: T.log(T.exp(a) + 1.0) * b,
    "exp": lambda a, b: T.exp(a * 0.5) * b,
    "reciprocal": lambda a, b: T.reciprocal(a * a + 1.0) * b,
    "mean": lambda a, b: (a * b).mean(axis=1) * 2.0,
    "concat": lambda a, b: T.concat([a, b * a], axis=1),
    "swapaxes": lambda a, b: (a.swapaxes(0, 1) @ b) * 1.0,
    "softmax": lambda a, b: T.softmax(a, axis=-1) * b,
    "softmax_weighted": lambda a, b: T.softmax(a, axis=-1, weights=T.sigmoid(b)) * a,
    "log_softmax": lambda a, b: T.log_softmax(a, axis=-1) * b,
    "layer_norm": lambda a, b: T.layer_norm(a, T.sigmoid(b.sum(axis=0)) + 0.5, b.mean(axis=0)) * b,
    "gather_rows": lambda a, b: T.gather_rows(a * b, np.array([2, 0, 2])),
    "scatter_rows": lambda a, b: T.scatter_rows(a * b, np.array([1, 1, 0]), 4) * 2.0,
    "take_along": lambda a, b: T.take_along(a * b, np.array([[1], [0], [2]]), axis=-1),
    "broadcast": lambda a, b: T.broadcast_to(a.sum(axis=0, keepdims=True), (3, 3)) * b,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a, b = p64(rng, 3, 3), p64(rng, 3, 3)
    f = PRIMITIVES[name]
    assert grad_check(lambda: f(a, b).sum(), [a, b], max_coords=None) < 1e-4


def test_embedding_gradient_accumulates_repeats():
    table = T.parameter(np.zeros((4, 2)))
    out = T.embedding(table, np.array([1, 1, 3]))
    out.sum().backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_float32_default():
    x = Tensor([1, 2, 3])
    assert x.dtype == np.float32
    assert T.sigmoid(x).dtype == np.float32
