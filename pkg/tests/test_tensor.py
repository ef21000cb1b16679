import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sen import tensor as T
from sen.tensor import NumericError, ShapeError, Tensor

from conftest import fd_max_rel_err


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul


def test_matmul_identity_and_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]])).data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_grad_matches_fd(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    assert fd_max_rel_err(lambda: T.reduce_sum(T.matmul(a, b)), [a, b]) < 1e-6


def test_matmul_backward_formulas(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    g = rng.normal(size=(3, 2))
    T.backward(T.reduce_sum(T.mul(T.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-13)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-13)


# -- concat


def test_concat_examples():
    out = T.concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])], axis=0)
    assert np.array_equal(out.data, [[1, 2], [3, 4]])
    one = Tensor([[5.0, 6.0]])
    assert np.array_equal(T.concat([one], axis=0).data, one.data)


def test_concat_backward_all_ones(rng):
    a, b = param(rng, 2, 3), param(rng, 1, 3)
    T.backward(T.reduce_sum(T.concat([a, b], axis=0)))
    assert np.array_equal(a.grad, np.ones((2, 3))) and np.array_equal(b.grad, np.ones((1, 3)))


def test_concat_errors():
    with pytest.raises(ShapeError):
        T.concat([], axis=0)
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=0)


# -- reduce_mean


def test_reduce_mean_examples():
    assert np.array_equal(T.reduce_mean(Tensor([[2.0, 4.0]]), axis=1).data, [3.0])
    c = Tensor(np.full((3, 5), 1.75))
    assert np.all(T.reduce_mean(c, axis=0).data == 1.75)
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    T.backward(T.reduce_mean(x, axis=0))
    assert np.array_equal(x.grad, [0.25] * 4)


def test_reduce_mean_bad_axis():
    with pytest.raises(ShapeError):
        T.reduce_mean(Tensor(np.ones((2, 2))), axis=2)


# -- softmax


def test_softmax_symmetry_and_overflow():
    assert np.array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax(Tensor([0.0, np.nan]))


def test_softmax_jacobian_fd(rng):
    x = param(rng, 3, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    assert fd_max_rel_err(lambda: T.reduce_sum(T.mul(T.softmax(x, axis=-1), w)), [x]) < 1e-5


@given(hnp.arrays(np.float64, st.integers(1, 7), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(v):
    s = T.softmax(Tensor(v)).data
    assert np.all(s > 0) and abs(s.sum() - 1.0) < 1e-12


# -- backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    T.backward(T.square(x))
    assert x.grad == 6.0


def test_backward_no_dependence_gives_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(4.0, requires_grad=True)
    T.backward(T.add(T.reduce_sum(T.scale(x, 0.0)), c))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_accumulates_and_zero_grad():
    x = Tensor(2.0, requires_grad=True)
    T.backward(T.square(x))
    T.backward(T.square(x))
    assert x.grad == 8.0
    x.zero_grad()
    assert np.all(x.grad == 0.0)


def test_backward_non_scalar_root():
    with pytest.raises(ShapeError):
        T.backward(T.scale(Tensor([1.0, 2.0], requires_grad=True), 2.0))


def test_composite_gelu_linear_fd(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    w, b = param(rng, 3, 5), param(rng, 5)
    r = Tensor(rng.normal(size=(4, 5)))
    f = lambda: T.reduce_sum(T.mul(T.gelu(T.add_bias(T.matmul(x, w), b)), r))
    assert fd_max_rel_err(f, [w, b]) < 1e-4


def test_tape_topological_and_unique(rng):
    a = param(rng, 2, 2)
    h = T.matmul(a, a)
    root = T.reduce_sum(T.add(h, h))
    order = T.tape(root)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]


# -- elementwise ops, layer norm, attention


def test_gelu_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14, atol=1e-16)


def test_layer_norm_stats_and_grad(rng):
    x = param(rng, 4, 6)
    g, b = param(rng, 6), param(rng, 6)
    y = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    var = x.data.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-10)
    r = Tensor(rng.normal(size=(4, 6)))
    assert fd_max_rel_err(lambda: T.reduce_sum(T.mul(T.layer_norm(x, g, b), r)), [x, g, b]) < 1e-4


def test_attention_heads_fd(rng):
    q, k, v = param(rng, 2, 5, 4), param(rng, 2, 5, 4), param(rng, 2, 5, 4)
    r = Tensor(rng.normal(size=(2, 5, 4)))
    f = lambda: T.reduce_sum(T.mul(T.scaled_dot_attention(q, k, v, heads=2), r))
    assert fd_max_rel_err(f, [q, k, v]) < 1e-4


def test_attention_matches_reference(rng):
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    out = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
    ref = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(2)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        ref.append((w / w.sum(axis=1, keepdims=True)) @ v[:, sl])
    np.testing.assert_allclose(out, np.concatenate(ref, axis=1), rtol=1e-12)


def test_elementwise_ops_fd(rng):
    a, b = param(rng, 3, 2), param(rng, 3, 2)
    f = lambda: T.reduce_sum(T.mul(T.sub(a, b), T.add(a, T.scale(b, 0.3))))
    assert fd_max_rel_err(f, [a, b]) < 1e-6


def test_cross_entropy_and_mse_fd(rng):
    z = param(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    assert fd_max_rel_err(lambda: T.cross_entropy(z, labels), [z]) < 1e-5
    p = param(rng, 3, 2)
    t = Tensor(rng.normal(size=(3, 2)))
    assert fd_max_rel_err(lambda: T.mse(p, t), [p]) < 1e-6


def test_l2_normalize_fd(rng):
    x = param(rng, 3, 4)
    r = Tensor(rng.normal(size=(3, 4)))
    assert fd_max_rel_err(lambda: T.reduce_sum(T.mul(T.l2_normalize(x), r)), [x]) < 1e-5


# -- shape safety and determinism


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_no_implicit_broadcast(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_bias_broadcast_is_explicit(rng):
    x, b = param(rng, 4, 3), param(rng, 3)
    T.backward(T.reduce_sum(T.add_bias(x, b)))
    assert np.array_equal(b.grad, np.full(3, 4.0))
    with pytest.raises(ShapeError):
        T.add_bias(x, Tensor(np.ones(4)))


def test_deterministic_grads():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))
        T.backward(T.reduce_sum(T.gelu(T.matmul(x, w))))
        return w.grad.tobytes()
    assert run() == run()


def test_no_grad_records_nothing(rng):
    w = param(rng, 2, 2)
    with T.no_grad():
        y = T.matmul(w, w)
    assert not y.requires_grad and y._parents == ()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_grad_shape_matches_data(shape):
    x = Tensor(np.random.default_rng(0).normal(size=shape), requires_grad=True)
    T.backward(T.reduce_sum(T.square(x)))
    assert x.grad.shape == x.shape
    np.testing.assert_array_equal(x.grad, 2 * x.data)
