import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from harmsim.errors import DimensionError, OracleError
from harmsim.ndcore import (
    AdamState,
    adam_update,
    affine_backward,
    affine_forward,
    fd_gradcheck,
    fd_gradient,
    relu_backward,
    relu_forward,
    softmax_rows,
)


def naive_affine(x, w, b):
    n, i = x.shape
    o = w.shape[1]
    out = np.zeros((n, o))
    for r in range(n):
        for c in range(o):
            acc = b[c]
            for k in range(i):
                acc += x[r, k] * w[k, c]
            out[r, c] = acc
    return out


def test_affine_identity():
    eye = np.eye(2)
    assert np.array_equal(affine_forward(eye, eye, np.zeros(2)), eye)


def test_affine_hand_arithmetic():
    out = affine_forward(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
    assert out.tolist() == [[6.0]]


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    assert np.max(np.abs(affine_forward(x, w, b) - naive_affine(x, w, b))) <= 1e-12


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        affine_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


def test_affine_backward_zero_upstream():
    rng = np.random.default_rng(1)
    g = affine_backward(rng.normal(size=(3, 2)), rng.normal(size=(2, 4)), np.zeros((3, 4)))
    assert not g.d_weights.any() and not g.d_bias.any() and not g.d_input.any()


def test_affine_backward_scalar_chain_rule():
    g = affine_backward(np.array([[2.0]]), np.array([[3.0]]), np.array([[1.0]]))
    assert (g.d_weights.item(), g.d_input.item(), g.d_bias.item()) == (2.0, 3.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_affine_backward_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, i, o = rng.integers(1, 6, size=3)
    x, w, b = rng.uniform(-1, 1, (n, i)), rng.uniform(-1, 1, (i, o)), rng.uniform(-1, 1, o)
    up = rng.normal(size=(n, o))
    g = affine_backward(x, w, up)

    def loss(x_, w_, b_):
        return float(np.sum(affine_forward(x_, w_, b_) * up))

    assert fd_gradcheck(lambda v: loss(x, v.reshape(w.shape), b), w.ravel(), g.d_weights.ravel()) < 1e-5
    assert fd_gradcheck(lambda v: loss(x, w, v), b, g.d_bias) < 1e-5
    assert fd_gradcheck(lambda v: loss(v.reshape(x.shape), w, b), x.ravel(), g.d_input.ravel()) < 1e-5


def test_relu_examples():
    x = np.array([[-1.0, 2.0]])
    assert relu_forward(x).tolist() == [[0.0, 2.0]]
    assert relu_backward(x, np.array([[5.0, 5.0]])).tolist() == [[0.0, 5.0]]


def test_relu_backward_vs_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    up = rng.normal(size=x.shape)
    f = lambda v: float(np.sum(relu_forward(v.reshape(x.shape)) * up))
    assert fd_gradcheck(f, x.ravel(), relu_backward(x, up).ravel()) < 1e-5


def test_softmax_symmetric_and_stable():
    assert softmax_rows(np.zeros((1, 4))).tolist() == [[0.25] * 4]
    p = softmax_rows(np.array([[1000.0, 0.0]]))
    assert abs(p[0, 0] - 1.0) <= 1e-12 and p[0, 1] <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)), elements=st.floats(-10, 10)))
def test_softmax_rows_are_distributions(logits):
    p = softmax_rows(logits)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)), elements=st.floats(-20, 20)),
    st.floats(-50, 50),
)
def test_softmax_invariant_to_row_shift(logits, c):
    assert np.allclose(softmax_rows(logits), softmax_rows(logits + c), atol=1e-12)


def test_adam_first_step_is_sign_like():
    g = np.array([0.5, -2.0, 1e-3])
    state = AdamState.zeros(3, lr=0.01)
    new, st_ = adam_update(np.zeros(3), g, state)
    expected = -0.01 * g / (np.abs(g) + state.eps)
    assert np.allclose(new, expected, rtol=1e-12, atol=1e-15)
    assert st_.step_count == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    state = AdamState(m=np.array([1.0]), v=np.array([4.0]), step_count=3, lr=0.1)
    new, st_ = adam_update(np.array([7.0]), np.zeros(1), state)
    assert st_.m[0] == pytest.approx(0.9) and st_.v[0] == pytest.approx(4.0 * 0.999)
    # momentum still moves the parameter; with zero moments it stays put
    new0, _ = adam_update(np.array([7.0]), np.zeros(1), AdamState.zeros(1, lr=0.1))
    assert new0[0] == 7.0
    assert new[0] < 7.0


def test_adam_converges_on_square():
    w = np.array([1.0])
    state = AdamState.zeros(1, lr=0.1)
    for _ in range(100):
        w, state = adam_update(w, 2.0 * w, state)
    assert abs(w[0]) < 0.05


def test_adam_length_mismatch():
    with pytest.raises(DimensionError):
        adam_update(np.zeros(2), np.zeros(3), AdamState.zeros(2))


def test_adam_does_not_mutate_inputs():
    p, g = np.ones(3), np.ones(3)
    state = AdamState.zeros(3)
    adam_update(p, g, state)
    assert p.tolist() == [1.0] * 3 and not state.m.any()


def test_gradcheck_sum_and_square():
    x = np.random.default_rng(0).normal(size=7)
    assert fd_gradcheck(np.sum, x, np.ones(7)) < 1e-9
    assert abs(fd_gradient(lambda v: float(v @ v), np.array([3.0]))[0] - 6.0) < 1e-6


def test_gradcheck_non_finite_raises():
    with pytest.raises(OracleError):
        fd_gradcheck(lambda v: math.inf, np.zeros(2), np.zeros(2))
