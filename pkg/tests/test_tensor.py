import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmfuse import tensor as T
from cmfuse.tensor import (
    Adam,
    AdamState,
    ContractError,
    DimensionError,
    DomainError,
    Tape,
    Tensor,
    adam_step,
    backward,
    elementwise,
    matmul,
    softmax,
)
from helpers import gradcheck, numeric_grad, rel_err


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_matmul_identity_and_hand_values():
    np.testing.assert_array_equal(matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]])).data, [[3], [4]])
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_times_bT():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = T.total(matmul(a, b))
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    fd = numeric_grad(lambda: T.total(matmul(a, b)).item(), a)
    assert rel_err(a.grad, fd) < 1e-8


def test_elementwise_trivial_values():
    assert elementwise("tanh", Tensor([0.0])).item() == 0.0
    np.testing.assert_array_equal(elementwise("relu", Tensor([-2.0, 3.0])).data, [[0.0, 3.0]])
    assert elementwise("sigmoid", Tensor([0.0])).item() == 0.5
    assert elementwise("scale", Tensor([2.0]), 3.0).item() == 6.0


def test_elementwise_errors():
    with pytest.raises(DomainError):
        elementwise("log", Tensor([1.0, 0.0]))
    with pytest.raises(DimensionError):
        elementwise("add", Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))
    with pytest.raises(ValueError):
        elementwise("cosh", Tensor([1.0]))


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([[0.0, 1.0, -1.0]])
    with Tape() as tape:
        loss = T.total(T.relu(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_sigmoid_extreme_inputs_are_finite():
    y = T.sigmoid(Tensor([[-1000.0, 1000.0]])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[0.0, 1.0]])


@pytest.mark.parametrize("c", [-3.0, 0.0, 7.5, 1000.0])
def test_softmax_equal_scores(c):
    np.testing.assert_allclose(softmax(Tensor([[c], [c]])).data, [[0.5], [0.5]], atol=0)


def test_softmax_log_values():
    p = softmax(Tensor([[math.log(1)], [math.log(3)]])).data
    np.testing.assert_allclose(p, [[0.25], [0.75]], atol=1e-15)


def test_softmax_requires_column():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.ones((2, 2))))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_probability_vector_and_shift_invariance(scores, c):
    s = np.array(scores).reshape(-1, 1)
    p = softmax(Tensor(s)).data
    q = softmax(Tensor(s + c)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(p - q)) < 1e-12


def test_backward_requires_scalar():
    x = leaf(np.ones((2, 2)))
    with Tape() as tape:
        y = T.tanh(x)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_unreached_params_hold_zero():
    x, unused = leaf([[1.0, 2.0]]), leaf([[5.0]])
    unused.grad = np.array([[9.0]])
    with Tape() as tape:
        loss = T.total(T.tanh(x))
    backward(tape, loss, [x, unused])
    assert unused.grad[0, 0] == 0.0


def test_grads_reset_between_backward_passes():
    x = leaf([[0.3, -0.2]])
    grads = []
    for _ in range(2):
        with Tape() as tape:
            loss = T.total(T.mul(x, x))
        backward(tape, loss, [x])
        grads.append(x.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_no_tape_means_no_recording():
    x = leaf([[1.0]])
    y = T.tanh(x)
    with Tape() as tape:
        pass
    assert len(tape) == 0 and not y.requires_grad


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 1)))
        with Tape() as tape:
            loss = T.total(T.mul(T.tanh(matmul(a, b)), T.sigmoid(matmul(a, b))))
        backward(tape, loss, [a, b])
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def _rand_away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


UNARY = ["tanh", "relu", "sigmoid", "exp", "log", "softplus"]


@pytest.mark.parametrize("op", UNARY)
def test_unary_gradients(op):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 5, size=2))
        x = _rand_away_from_zero(rng, shape)
        if op == "log":
            x = np.abs(x) + 0.1
        a = leaf(x)
        w = Tensor(rng.normal(size=shape))
        assert gradcheck(lambda: T.total(T.mul(elementwise(op, a), w)), [a]) < 1e-6


def test_structural_op_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = leaf(rng.normal(size=(1, 4)))
        b = leaf(rng.normal(size=(1, 3)))
        w = Tensor(rng.normal(size=(1, 12)))
        assert gradcheck(lambda: T.total(T.mul(T.kron(a, b), w)), [a, b]) < 1e-6
        p = leaf(rng.uniform(0.2, 0.9, size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 4)))
        assert gradcheck(lambda: T.total(T.mul(T.cumprod(p), v)), [p]) < 1e-6
        m = leaf(rng.normal(size=(1, 6)))
        u = Tensor(rng.normal(size=(1, 6)))
        assert gradcheck(lambda: T.total(T.mul(T.minmax_scale(m), u)), [m]) < 1e-6
        c = leaf(rng.normal(size=(2, 3)))
        assert gradcheck(lambda: T.take(T.reshape(T.transpose(c), 1, 6), 0, seed % 6), [c]) < 1e-6


def test_minmax_scale_range_and_constant_input():
    y = T.minmax_scale(Tensor([[3.0, -1.0, 1.0]])).data
    np.testing.assert_allclose(y, [[1.0, 0.0, 0.5]])
    np.testing.assert_array_equal(T.minmax_scale(Tensor([[2.0, 2.0]])).data, [[0.0, 0.0]])


def test_adam_zero_gradient_leaves_param():
    p = leaf([[1.5, -2.0]])
    p.grad = np.zeros((1, 2))
    state = AdamState.for_param(p)
    adam_step(state, p)
    np.testing.assert_array_equal(p.data, [[1.5, -2.0]])
    assert state.t == 1


def test_adam_first_step_is_about_minus_lr():
    p = leaf([[0.0]])
    p.grad = np.array([[1.0]])
    adam_step(AdamState.for_param(p, lr=0.01), p)
    # m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
    assert p.item() == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_adam_missing_grad():
    with pytest.raises(ContractError):
        adam_step(AdamState.for_param(leaf([[1.0]])), leaf([[1.0]]))


def test_adam_decreases_convex_quadratic():
    p = leaf([[3.0, -2.0]])
    opt = Adam([p], lr=0.01)
    values = []
    for _ in range(2):
        with Tape() as tape:
            loss = T.total(T.mul(p, p))
        values.append(loss.item())
        backward(tape, loss, [p])
        opt.step()
    values.append(float((p.data ** 2).sum()))
    assert values[0] > values[1] > values[2]


def test_flat_adam_matches_per_param_rule():
    rng = np.random.default_rng(0)
    shapes = [(3, 4), (1, 4), (4, 1)]
    a = [leaf(rng.normal(size=s)) for s in shapes]
    b = [leaf(t.data.copy()) for t in a]
    opt = Adam(a, lr=0.01)
    states = [AdamState.for_param(t) for t in b]
    for _ in range(5):
        grads = [rng.normal(size=s) for s in shapes]
        for ta, tb, g in zip(a, b, grads):
            ta.grad[...] = g
            tb.grad = g.copy()
        opt.step()
        for s, tb in zip(states, b):
            adam_step(s, tb)
    for ta, tb in zip(a, b):
        np.testing.assert_allclose(ta.data, tb.data, rtol=1e-13, atol=1e-15)
