import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sen import tensor as T
from sen.adapters import (ClassEmbeddings, InjectionTarget, average_features, context_inject,
                          contrastive_predict, resize_matrix, similarity_matrix)
from sen.tensor import NumericError, ShapeError, Tensor

E = np.eye(4)


def two_classes():
    return ClassEmbeddings(Tensor(E[:2]), ["a", "b"])


def test_agreeing_streams():
    idx, scores = contrastive_predict(Tensor(E[0]), Tensor(E[0]), two_classes())
    assert idx == 0 and np.array_equal(scores.data, [2.0, 0.0])


def test_tie_goes_to_lowest_index():
    idx, scores = contrastive_predict(Tensor(E[0]), Tensor(E[1]), two_classes())
    assert idx == 0 and np.array_equal(scores.data, [1.0, 1.0])


def test_zero_norm_feature():
    with pytest.raises(NumericError):
        contrastive_predict(Tensor(np.zeros(4)), Tensor(E[0]), two_classes())


def test_class_rows_must_be_unit():
    with pytest.raises(ValueError):
        ClassEmbeddings(Tensor(2 * E[:2]), ["a", "b"])
    assert ClassEmbeddings.from_raw(2 * E[:2]).n_classes == 2


def test_five_class_brute_force(rng):
    classes = ClassEmbeddings.from_raw(rng.normal(size=(5, 6)))
    for _ in range(20):
        v, a = rng.normal(size=6), rng.normal(size=6)
        best, best_score = None, -np.inf
        for c in range(5):
            e = classes.matrix.data[c]
            s = v @ e / np.linalg.norm(v) + a @ e / np.linalg.norm(a)
            if s > best_score:
                best, best_score = c, s
        assert contrastive_predict(Tensor(v), Tensor(a), classes)[0] == best


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 10 ** 6))
def test_argmax_scale_invariant(sv, sa, seed):
    rng = np.random.default_rng(seed)
    classes = ClassEmbeddings.from_raw(rng.normal(size=(4, 5)))
    v, a = rng.normal(size=5), rng.normal(size=5)
    base = contrastive_predict(Tensor(v), Tensor(a), classes)[0]
    assert contrastive_predict(Tensor(sv * v), Tensor(sa * a), classes)[0] == base


def test_batch_matches_rows(rng):
    classes = ClassEmbeddings.from_raw(rng.normal(size=(3, 4)))
    v, a = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    idx, scores = contrastive_predict(Tensor(v), Tensor(a), classes)
    assert np.array_equal(idx, np.argmax(similarity_matrix(v, a, classes), axis=1))
    assert [contrastive_predict(Tensor(v[i]), Tensor(a[i]), classes)[0] for i in range(8)] == list(idx)


def test_audio_class_pairing_flag(rng):
    text = ClassEmbeddings.from_raw(rng.normal(size=(3, 4)))
    audio_cls = ClassEmbeddings.from_raw(rng.normal(size=(3, 4)))
    v, a = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    vu = v / np.linalg.norm(v, axis=1, keepdims=True)
    np.testing.assert_allclose(similarity_matrix(v, a, text, audio_cls),
                               vu @ text.matrix.data.T + vu @ audio_cls.matrix.data.T, rtol=1e-13)


# -- context injection


def test_resize_4_to_7_table():
    # positions 0, .5, 1, 1.5, 2, 2.5, 3 over a length-4 signal
    expected = np.array([
        [1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.5, 1.0, 0.5, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.5, 1.0, 0.5, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 1.0],
    ])
    assert np.array_equal(resize_matrix(4, 7), expected)
    out = context_inject(Tensor([1.0, 3.0, 5.0, 11.0]), InjectionTarget((7,)))
    assert np.array_equal(out.data, [1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 11.0])


def test_identity_resize(rng):
    c = rng.normal(size=12)
    assert np.array_equal(context_inject(Tensor(c), InjectionTarget((3, 4))).data, c.reshape(3, 4))


@given(st.integers(1, 9), st.lists(st.integers(1, 5), min_size=1, max_size=3), st.floats(-5, 5))
def test_constant_context_stays_constant(d, shape, value):
    out = context_inject(Tensor(np.full(d, value)), InjectionTarget(tuple(shape))).data
    assert out.shape == tuple(shape)
    np.testing.assert_allclose(out, value, rtol=1e-12, atol=1e-12)


@given(st.integers(2, 9), st.integers(2, 20), st.integers(0, 10 ** 6))
def test_endpoints_preserved(d, size, seed):
    c = np.random.default_rng(seed).normal(size=d)
    out = context_inject(Tensor(c), InjectionTarget((size,))).data
    assert out[0] == c[0] and out[-1] == c[-1]


def test_injection_target_errors():
    with pytest.raises(ShapeError):
        InjectionTarget(())
    with pytest.raises(ShapeError):
        InjectionTarget((2, 0))


def test_context_inject_is_differentiable(rng):
    c = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    T.backward(T.reduce_sum(context_inject(c, InjectionTarget((3, 3)))))
    np.testing.assert_allclose(c.grad, np.tile(resize_matrix(5, 9).sum(axis=1), (2, 1)))


# -- averaging


def test_average_features(rng):
    v = Tensor(rng.normal(size=6))
    assert np.array_equal(average_features([v]).data, v.data)
    assert np.all(average_features([v, T.scale(v, -1.0)]).data == 0)
    fs = [Tensor(rng.normal(size=6)) for _ in range(3)]
    assert average_features(fs).data.tobytes() == T.reduce_mean(T.stack(fs, 0), 0).data.tobytes()
    with pytest.raises(ShapeError):
        average_features([])
