"""Tape and op contracts: hand examples plus finite-difference checks."""

from __future__ import annotations

import numpy as np
import pytest

from helpers import fd_grad, rel_err

from tinycil import tensor as T
from tinycil.errors import ShapeError, TapeError

RNG = np.random.default_rng


def _check_grads(build_loss, arrays, tol=1e-4, h=1e-5):
    """build_loss(tensors) -> scalar Tensor; compares tape grads with FD."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build_loss(*tensors)
    T.backward(tape, loss)

    for i, t in enumerate(tensors):
        def f(i=i):
            ts = [T.Tensor(a) for a in arrays]
            return build_loss(*ts).data.item()
        num = fd_grad(f, arrays[i], h=h)
        assert t.grad is not None
        assert rel_err(t.grad, num) < tol, f"input {i}: {rel_err(t.grad, num)}"


# --- matmul ----------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(6, dtype=float).reshape(2, 3)
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[11.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_matmul_grad_vs_fd():
    rng = RNG(0)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (4, 2))
    _check_grads(lambda x, y: T.sum_(T.matmul(x, y)), [a, b], tol=1e-6)


def test_matmul_batched_grad_vs_fd():
    rng = RNG(1)
    a = rng.uniform(-1, 1, (2, 3, 4))
    b = rng.uniform(-1, 1, (4, 5))
    _check_grads(lambda x, y: T.sum_(T.matmul(x, y)), [a, b], tol=1e-5)


# --- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3))


def test_softmax_overflow_safe():
    out = T.softmax(T.Tensor([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_direct_value():
    out = T.softmax(T.Tensor([1.0, 2.0]))
    np.testing.assert_allclose(out.data, [0.26894, 0.73106], atol=1e-5)


def test_softmax_rows_sum_to_one():
    rng = RNG(2)
    for _ in range(20):
        x = rng.uniform(-1e4, 1e4, (5, 7))
        y = T.softmax(T.Tensor(x), axis=-1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_grad_vs_fd():
    rng = RNG(3)
    x = rng.uniform(-1, 1, (4, 5))
    w = rng.uniform(-1, 1, (4, 5))
    _check_grads(lambda t: T.sum_(T.mul(T.softmax(t, axis=-1), w)), [x])


# --- layer norm ------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    x = T.Tensor(np.full((2, 6), 3.7))
    out = T.layer_norm(x, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_standardizes():
    rng = RNG(4)
    x = rng.uniform(-1, 1, (3, 16))
    out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_grad_vs_fd():
    rng = RNG(5)
    x = rng.uniform(-1, 1, (3, 8))
    gain = rng.uniform(0.5, 1.5, 8)
    bias = rng.uniform(-0.5, 0.5, 8)
    w = rng.uniform(-1, 1, (3, 8))
    _check_grads(lambda a, g, b: T.sum_(T.mul(T.layer_norm(a, g, b), w)),
                 [x, gain, bias], tol=1e-5)


# --- conv2d ----------------------------------------------------------------

def test_conv2d_one_by_one_kernel_sums_channels():
    rng = RNG(6)
    x = rng.uniform(-1, 1, (1, 3, 4, 4))
    k = np.ones((1, 3, 1, 1))
    out = T.conv2d(T.Tensor(x), T.Tensor(k))
    np.testing.assert_allclose(out.data[0, 0], x[0].sum(axis=0))


def test_conv2d_full_window_is_dot():
    rng = RNG(7)
    x = rng.uniform(-1, 1, (1, 1, 3, 3))
    k = rng.uniform(-1, 1, (1, 1, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(k))
    assert out.shape == (1, 1, 1, 1)
    np.testing.assert_allclose(out.data.ravel(), [(x * k).sum()])


def test_conv2d_empty_output_raises():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_grads_vs_fd():
    rng = RNG(8)
    x = rng.uniform(-1, 1, (2, 2, 5, 5))
    k = rng.uniform(-1, 1, (3, 2, 3, 3))
    w = rng.uniform(-1, 1, (2, 3, 2, 2))
    _check_grads(lambda a, b: T.sum_(T.mul(T.conv2d(a, b, stride=2, padding=0), w)),
                 [x, k], tol=1e-5)


def test_conv2d_grads_vs_fd_padded():
    rng = RNG(9)
    x = rng.uniform(-1, 1, (1, 2, 4, 4))
    k = rng.uniform(-1, 1, (2, 2, 3, 3))
    _check_grads(lambda a, b: T.sum_(T.conv2d(a, b, stride=2, padding=1)),
                 [x, k], tol=1e-5)


# --- backward contracts ------------------------------------------------------

def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(x)
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_sum_of_squares_gives_x():
    x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.mul(T.sum_(T.mul(x, x)), 0.5)
    T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_twice_raises():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(x)
    T.backward(tape, loss)
    with pytest.raises(TapeError):
        T.backward(tape, loss)


def test_backward_non_scalar_raises():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(TapeError):
        T.backward(tape, y)


def test_backward_unrecorded_loss_raises():
    x = T.Tensor(np.ones(3))  # not tracked
    with T.Tape() as tape:
        loss = T.sum_(x)
    with pytest.raises(TapeError):
        T.backward(tape, loss)


def test_untracked_tensor_never_gets_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    c = T.Tensor(np.full(3, 2.0))  # constant
    with T.Tape() as tape:
        loss = T.sum_(T.mul(x, c))
    T.backward(tape, loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, c.data)


def test_grads_accumulate_across_uses():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1 = 5
    T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_recording_without_tape():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, 3.0)
    assert y.tape_id is None


# --- elementwise / reductions / shape ops vs FD ------------------------------

def test_elementwise_grads_vs_fd():
    rng = RNG(10)
    a = rng.uniform(0.3, 1.3, (3, 4))
    b = rng.uniform(0.3, 1.3, (3, 4))

    def loss(x, y):
        z = T.div(T.mul(T.add(x, y), T.sub(x, y)), y)
        return T.sum_(T.mul(z, z))

    _check_grads(loss, [a, b])


def test_broadcast_grads_vs_fd():
    rng = RNG(11)
    a = rng.uniform(-1, 1, (3, 1))
    b = rng.uniform(-1, 1, (1, 4))
    _check_grads(lambda x, y: T.sum_(T.mul(T.add(x, y), T.add(x, y))), [a, b])


def test_unary_grads_vs_fd():
    rng = RNG(12)
    x = rng.uniform(0.2, 1.0, (3, 3))

    def loss(t):
        return T.sum_(T.add(T.exp(t), T.add(T.log(t), T.neg(t))))

    _check_grads(loss, [x])


def test_relu_gelu_grads_vs_fd():
    rng = RNG(13)
    x = rng.uniform(-1, 1, (4, 4))
    x[np.abs(x) < 0.1] += 0.2  # keep away from the relu kink
    _check_grads(lambda t: T.sum_(T.relu(t)), [x.copy()])
    _check_grads(lambda t: T.sum_(T.gelu(t)), [x.copy()], tol=1e-5)


def test_reduction_grads_vs_fd():
    rng = RNG(14)
    x = rng.uniform(-1, 1, (3, 4, 2))

    def loss(t):
        s = T.sum_(t, axis=1)
        m = T.mean(t, axis=(0, 2))
        return T.add(T.sum_(T.mul(s, s)), T.sum_(T.mul(m, m)))

    _check_grads(loss, [x])


def test_max_reduction_grad_and_ties():
    rng = RNG(15)
    x = rng.uniform(-1, 1, (3, 5))
    _check_grads(lambda t: T.sum_(T.max_(t, axis=1)), [x])

    tied = T.Tensor(np.array([[1.0, 1.0, 0.0]]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.max_(tied, axis=1))
    T.backward(tape, loss)
    np.testing.assert_array_equal(tied.grad, [[1.0, 0.0, 0.0]])


def test_shape_op_grads_vs_fd():
    rng = RNG(16)
    x = rng.uniform(-1, 1, (2, 3, 4))
    w = rng.uniform(-1, 1, (4, 6))

    def loss(t):
        r = T.reshape(t, (4, 6))
        tr = T.transpose(r, (1, 0))
        back = T.transpose(tr)  # default reverses axes
        return T.sum_(T.mul(back, w))

    _check_grads(loss, [x])


def test_concat_index_grads_vs_fd():
    rng = RNG(17)
    a = rng.uniform(-1, 1, (2, 3))
    b = rng.uniform(-1, 1, (2, 2))

    def loss(x, y):
        c = T.concat([x, y], axis=1)
        s = c[:, 1:4]
        return T.sum_(T.mul(s, s))

    _check_grads(loss, [a, b])


def test_take_ops_grads_vs_fd():
    rng = RNG(18)
    x = rng.uniform(-1, 1, (4, 5))
    rows = np.array([0, 2, 2])
    cols = np.array([[1, 3], [0, 0], [4, 2]])

    def loss(t):
        sub = T.take(t, rows, axis=0)
        picked = T.take_along_axis(sub, cols, axis=1)
        return T.sum_(T.mul(picked, picked))

    _check_grads(loss, [x])


def test_l2_normalize_grads_and_value():
    rng = RNG(19)
    x = rng.uniform(0.2, 1.0, (3, 6))
    y = T.l2_normalize(T.Tensor(x), axis=-1).data
    np.testing.assert_allclose((y * y).sum(axis=-1), 1.0, atol=1e-12)
    w = rng.uniform(-1, 1, (3, 6))
    _check_grads(lambda t: T.sum_(T.mul(T.l2_normalize(t, axis=-1), w)), [x])


def test_l2_normalize_zero_row_guarded():
    y = T.l2_normalize(T.Tensor(np.zeros((1, 4))), axis=-1).data
    assert np.isfinite(y).all()


def test_batch_norm_train_grads_vs_fd():
    rng = RNG(20)
    x = rng.uniform(-1, 1, (3, 2, 4, 4))
    gain = rng.uniform(0.5, 1.5, 2)
    bias = rng.uniform(-0.5, 0.5, 2)
    w = rng.uniform(-1, 1, (3, 2, 4, 4))

    def loss(a, g, b):
        rm = np.zeros(2)
        rv = np.ones(2)
        out = T.batch_norm(a, g, b, rm, rv, training=True)
        return T.sum_(T.mul(out, w))

    _check_grads(loss, [x, gain, bias], tol=1e-4)


def test_batch_norm_eval_grads_vs_fd():
    rng = RNG(21)
    x = rng.uniform(-1, 1, (2, 3, 3, 3))
    gain = rng.uniform(0.5, 1.5, 3)
    bias = rng.uniform(-0.5, 0.5, 3)
    rm = rng.uniform(-0.2, 0.2, 3)
    rv = rng.uniform(0.8, 1.2, 3)

    def loss(a, g, b):
        out = T.batch_norm(a, g, b, rm.copy(), rv.copy(), training=False)
        return T.sum_(T.mul(out, out))

    _check_grads(loss, [x, gain, bias], tol=1e-5)


def test_batch_norm_updates_running_stats():
    rng = RNG(22)
    x = rng.uniform(-1, 1, (4, 2, 3, 3))
    rm = np.zeros(2)
    rv = np.ones(2)
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                 rm, rv, training=True, momentum=0.1)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)
