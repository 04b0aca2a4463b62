"""Unit tests for the tensor/tape engine and the optimizer."""

import numpy as np
import pytest

from meshseg import autodiff as ad
from meshseg.autodiff import Tape, Tensor
from meshseg.errors import ContractViolation, NonFiniteError, TapeConsumedError
from meshseg.optim import AdamState, adam_step


def linear(x, W, b):
    return ad.matmul(x, W) + b


# ---------------------------------------------------------------- linear

def test_linear_identity():
    x = Tensor([[1.0, 2.0]])
    out = linear(x, Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_linear_hand_oracle():
    x = Tensor([[1.0, 0.0], [0.0, 1.0]])
    W = Tensor([[2.0, 3.0], [4.0, 5.0]])
    b = Tensor([1.0, 1.0])
    out = linear(x, W, b)
    np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_linear_annihilation():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    out = linear(x, Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2)))


def test_linear_gradients_hand_oracle():
    # loss = sum(x @ W + b):  dW = x^T 1, db = column sums of 1, dx = 1 W^T
    x = Tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    W = Tensor([[1.0, 2.0], [0.0, 1.0]], requires_grad=True)
    b = Tensor([1.0, -1.0], requires_grad=True)
    with Tape() as tape:
        out = linear(x, W, b)
        np.testing.assert_array_equal(out.data, [[4.0, 9.0], [6.0, 15.0]])
        tape.backward(ad.sum_(out))
    np.testing.assert_array_equal(W.grad, [[8.0, 8.0], [10.0, 10.0]])
    np.testing.assert_array_equal(b.grad, [2.0, 2.0])
    np.testing.assert_array_equal(x.grad, [[3.0, 1.0], [3.0, 1.0]])


def test_matmul_shape_errors():
    with pytest.raises(ContractViolation):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ContractViolation):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------- basic ops

def test_backward_sum_of_squares():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_linear_in_w():
    x = np.array([[1.0, 2.0, 3.0]])
    W = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(ad.matmul(Tensor(x), W)))
    np.testing.assert_array_equal(W.grad, np.repeat(x.T, 2, axis=1))


def test_broadcast_gradients():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(a * b))
    np.testing.assert_array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (4, 1)))
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_div_neg_sub_gradients():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([4.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(a / b - (-a)))
    np.testing.assert_allclose(a.grad, [1.0 / 4.0 + 1.0])
    np.testing.assert_allclose(b.grad, [-2.0 / 16.0])


def test_concat_and_reshape_roundtrip():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    with Tape() as tape:
        cat = ad.concat([a, b], axis=1)
        assert cat.data.shape == (2, 5)
        flat = ad.reshape(cat, (10,))
        tape.backward(ad.sum_(flat * Tensor(np.arange(10.0))))
    np.testing.assert_array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
    np.testing.assert_array_equal(b.grad, [[3, 4], [8, 9]])


def test_gather_rows_scatter_backward():
    a = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    idx = np.array([[0, 1], [0, 0], [3, 2], [1, 1]])
    with Tape() as tape:
        out = ad.gather_rows(a, idx)
        tape.backward(ad.sum_(out))
    # row 0 appears 3 times, row 1 three times, rows 2 and 3 once each
    np.testing.assert_array_equal(a.grad, [[3, 3], [3, 3], [1, 1], [1, 1]])


def test_max_routes_to_first_argmax_on_ties():
    a = Tensor([[2.0, 5.0, 5.0]], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(ad.max_(a, axis=1)))
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0, 0.0]])


def test_mean_gradient():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(ad.mean_(a, axis=0)))
    np.testing.assert_allclose(a.grad, np.full((3, 4), 1.0 / 3.0))


def test_sqrt_zero_derivative_is_zero():
    a = Tensor([0.0, 4.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(ad.sqrt(a)))
    np.testing.assert_array_equal(a.grad, [0.0, 0.25])


# ---------------------------------------------------------------- leaky relu

def test_leaky_relu_values():
    x = Tensor([0.0, 3.5, -2.0])
    out = ad.leaky_relu(x, 0.01)
    np.testing.assert_allclose(out.data, [0.0, 3.5, -0.02])


def test_leaky_relu_gradient():
    x = Tensor([1.0, -1.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(ad.leaky_relu(x, 0.01)))
    np.testing.assert_array_equal(x.grad, [1.0, 0.01])


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    scores = Tensor(np.zeros((1, 4, 2)))
    out = ad.softmax(scores, axis=1)
    np.testing.assert_allclose(out.data, np.full((1, 4, 2), 0.25))


def test_softmax_two_scores():
    scores = Tensor(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1))
    out = ad.softmax(scores, axis=1)
    np.testing.assert_allclose(out.data.ravel(), [0.25, 0.75], atol=1e-15)


def test_softmax_large_score_no_overflow():
    scores = Tensor(np.array([1000.0, 0.0, 0.0]).reshape(1, 3, 1))
    out = ad.softmax(scores, axis=1)
    assert np.isfinite(out.data).all()
    assert out.data.ravel()[0] > 1.0 - 1e-12


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=(5, 7, 3))
    a = ad.softmax(Tensor(scores), axis=1)
    b = ad.softmax(Tensor(scores + 123.456), axis=1)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_one_hot_is_zero():
    probs = Tensor(np.eye(3))
    loss = ad.cross_entropy(probs, np.array([0, 1, 2]))
    assert float(loss.data) == 0.0


def test_cross_entropy_uniform_eight_classes():
    probs = Tensor(np.full((4, 8), 1.0 / 8.0))
    loss = ad.cross_entropy(probs, np.zeros(4, dtype=int))
    np.testing.assert_allclose(float(loss.data), np.log(8.0))


def test_cross_entropy_point_seven():
    loss = ad.cross_entropy(Tensor([[0.7, 0.3]]), np.array([0]))
    np.testing.assert_allclose(float(loss.data), -np.log(0.7))


def test_cross_entropy_contract_checks():
    with pytest.raises(ContractViolation):
        ad.cross_entropy(Tensor([[0.5, 0.2]]), np.array([0]))  # bad row sum
    with pytest.raises(ContractViolation):
        ad.cross_entropy(Tensor([[0.5, 0.5]]), np.array([2]))  # label range
    with pytest.raises(ContractViolation):
        ad.cross_entropy(Tensor([[0.5, 0.5]]), np.array([[0]]))  # label shape


def test_cross_entropy_gradient():
    probs = Tensor([[0.7, 0.3], [0.4, 0.6]], requires_grad=True)
    labels = np.array([0, 1])
    with Tape() as tape:
        tape.backward(ad.cross_entropy(probs, labels))
    np.testing.assert_allclose(
        probs.grad, [[-1.0 / (2 * 0.7), 0.0], [0.0, -1.0 / (2 * 0.6)]])


# ---------------------------------------------------------------- batch norm fused

def test_batch_norm_train_statistics():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(2.0, 3.0, size=(8, 4)))
    out, mu, var = ad.batch_norm_train(x, Tensor(np.ones(4)),
                                       Tensor(np.zeros(4)), 1e-5)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-4)
    np.testing.assert_allclose(mu, x.data.mean(axis=0))
    np.testing.assert_allclose(var, x.data.var(axis=0))  # biased


def test_batch_norm_constant_column_maps_to_beta():
    x = Tensor(np.full((6, 2), 7.0))
    beta = Tensor(np.array([1.5, -2.0]))
    out, _, _ = ad.batch_norm_train(x, Tensor(np.ones(2)), beta, 1e-5)
    np.testing.assert_allclose(out.data, np.tile(beta.data, (6, 1)))


# ---------------------------------------------------------------- tape semantics

def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
        with pytest.raises(ContractViolation):
            tape.backward(y)


def test_backward_twice_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x * x)
        tape.backward(loss)
        with pytest.raises(TapeConsumedError):
            tape.backward(loss)


def test_gradients_accumulate_across_uses():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_(x * x + x))
    np.testing.assert_array_equal(x.grad, [5.0])


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    assert y.grad is None and x.grad is None


def test_nested_tapes_inner_only():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        with Tape() as inner:
            inner.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [6.0])


# ---------------------------------------------------------------- non-finite policy

def test_non_finite_raises_at_op_boundary():
    a = Tensor([1.0])
    b = Tensor([0.0])
    with pytest.raises(NonFiniteError):
        a / b
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_sqrt_of_negative_raises():
    with pytest.raises(NonFiniteError):
        ad.sqrt(Tensor([-1.0]))


# ---------------------------------------------------------------- where_mask

def test_where_mask_selects_and_blocks_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([10.0, 20.0], requires_grad=True)
    cond = np.array([True, False])
    with Tape() as tape:
        out = ad.where_mask(cond, a, b)
        np.testing.assert_array_equal(out.data, [1.0, 20.0])
        tape.backward(ad.sum_(out))
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


# ---------------------------------------------------------------- weighted sum

def test_weighted_sum_neighbors_matches_loop():
    rng = np.random.default_rng(7)
    alpha = Tensor(rng.random((4, 3, 2)), requires_grad=True)
    vals = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
    with Tape() as tape:
        out = ad.weighted_sum_neighbors(alpha, vals)
        tape.backward(ad.sum_(out))
    expect = np.zeros((4, 2))
    for i in range(4):
        for j in range(3):
            expect[i] += alpha.data[i, j] * vals.data[i, j]
    np.testing.assert_allclose(out.data, expect)
    np.testing.assert_allclose(alpha.grad, vals.data)
    np.testing.assert_allclose(vals.grad, alpha.data)


# ---------------------------------------------------------------- composite FD

def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(6, 3)))
    Ws = [Tensor(rng.normal(size=s), requires_grad=True)
          for s in ((3, 5), (5, 4), (4, 2))]

    def loss_value():
        h = x
        for W in Ws:
            h = ad.leaky_relu(ad.matmul(h, W), 0.01)
        return ad.sum_(h * h)

    with Tape() as tape:
        tape.backward(loss_value())

    h = 1e-5
    for W in Ws:
        flat = W.data.ravel()
        for pos in (0, flat.size // 2, flat.size - 1):
            orig = flat[pos]
            flat[pos] = orig + h
            up = float(loss_value().data)
            flat[pos] = orig - h
            down = float(loss_value().data)
            flat[pos] = orig
            fd = (up - down) / (2 * h)
            an = W.grad.ravel()[pos]
            assert abs(an - fd) / (abs(an) + abs(fd) + 1e-12) < 1e-4


# ---------------------------------------------------------------- adam

def test_adam_first_step_magnitude():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.37])
    params = {"p": p}
    state = AdamState(params)
    adam_step(params, state, lr=0.001)
    np.testing.assert_allclose(abs(1.0 - p.data[0]), 0.001, rtol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.zeros(2)
    params = {"p": p}
    state = AdamState(params)
    adam_step(params, state, lr=0.001)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_two_steps_match_recurrence_oracle():
    # theta0 = 1.25, g = 0.5, lr = 1e-3; values frozen from an independent
    # scalar implementation of the bias-corrected recurrences
    p = Tensor([1.25], requires_grad=True)
    params = {"p": p}
    state = AdamState(params)
    for expected in (1.24900000002, 1.24800000004):
        p.grad = np.array([0.5])
        adam_step(params, state, lr=0.001)
        np.testing.assert_allclose(p.data[0], expected, atol=1e-11)


def test_adam_shape_mismatch_rejected():
    p = Tensor([1.0], requires_grad=True)
    params = {"p": p}
    state = AdamState(params)
    p.grad = np.zeros(3)
    with pytest.raises(ContractViolation):
        adam_step(params, state, lr=0.001)
