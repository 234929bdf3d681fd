import numpy as np
import pytest

from genagg import tensor as T
from genagg.aggregators import SegmentedMessages, agg_softmax
from genagg.errors import BatchTooSmallError, DoubleBackwardError, NumericError, ShapeError
from genagg.layers import msg_norm
from genagg.tensor import Scalar, Tensor, backward, finite_difference_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- forward values --------------------------------------------------------


def test_matmul_identity_and_hand_values():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(T.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_values():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(T.scale(Tensor([2.0, 4.0]), 0.5).data, [1.0, 2.0])
    with pytest.raises(ShapeError):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_relu_values_idempotence_and_subgradient():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.random.default_rng(0).standard_normal(20)
    assert np.array_equal(T.relu(T.relu(Tensor(x))).data, T.relu(Tensor(x)).data)
    a = leaf([-1.0, 3.0])
    backward(T.sum(T.relu(a)))
    assert np.array_equal(a.grad, [0.0, 1.0])
    z = leaf([0.0])
    backward(T.sum(T.relu(z)))
    assert z.grad[0] == 0.0


def test_l2_norm_values_and_zero_gradient():
    assert T.l2_norm(Tensor([[3.0, 4.0]])).data[0] == 5.0
    z = leaf([[0.0, 0.0]])
    out = T.l2_norm(z)
    assert out.data[0] == 0.0
    backward(T.sum(out))
    assert np.array_equal(z.grad, [[0.0, 0.0]])


def test_layer_norm_constant_row_and_moments():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), g, b).data, np.zeros((1, 4)))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 16)) * 3 + 2
    gamma = np.full(16, 2.5)
    shift = rng.standard_normal(16)
    y = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(shift)).data
    assert np.allclose((y - shift).mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose((y - shift).std(axis=1), 2.5, atol=1e-5)  # eps=1e-5 shrinks std slightly


def test_batch_norm_contracts():
    st = T.BatchNormState.fresh(3)
    out = T.batch_norm(Tensor(np.ones((2, 3))), st, training=True)
    assert np.array_equal(out.data, np.zeros((2, 3)))
    x = np.random.default_rng(2).standard_normal((5, 3))
    ev = T.batch_norm(Tensor(x), T.BatchNormState.fresh(3), training=False)
    assert np.allclose(ev.data, x / np.sqrt(1 + T.NORM_EPS), atol=0, rtol=1e-15)
    tr = T.batch_norm(Tensor(x * 4 + 7), T.BatchNormState.fresh(3), training=True)
    assert np.allclose(tr.data.mean(axis=0), 0.0, atol=1e-6)
    with pytest.raises(BatchTooSmallError):
        T.batch_norm(Tensor(np.ones((1, 3))), T.BatchNormState.fresh(3), training=True)


def test_batch_norm_running_stats_momentum():
    x = np.array([[0.0], [2.0]])
    st = T.BatchNormState.fresh(1)
    T.batch_norm(Tensor(x), st, training=True)
    assert st.running_mean[0] == pytest.approx(0.1 * 1.0, abs=1e-15)
    assert st.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 2.0, abs=1e-15)


# -- backward --------------------------------------------------------------


def test_sum_gives_ones_and_unused_param_is_zero():
    x, unused = leaf(np.arange(4.0)), leaf(np.ones(3))
    backward(T.sum(x))
    assert np.array_equal(x.grad, np.ones(4))
    assert np.array_equal(unused.grad, np.zeros(3))


def test_double_backward_raises():
    x = leaf([1.0, 2.0])
    loss = T.sum(T.mul(x, x))
    backward(loss)
    with pytest.raises(DoubleBackwardError):
        backward(loss)


def test_backward_requires_single_element():
    with pytest.raises(ShapeError):
        backward(T.mul(leaf([1.0, 2.0]), Tensor([1.0, 1.0])))


def test_accumulation_is_sum_of_single_uses_bitwise():
    rng = np.random.default_rng(3)
    xv, w1, w2 = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5)
    a = leaf(xv)
    backward(T.sum(T.mul(a, Tensor(w1))))
    g1 = a.grad.copy()
    a.zero_grad()
    backward(T.sum(T.mul(a, Tensor(w2))))
    g2 = a.grad.copy()
    b = leaf(xv)
    backward(T.add(T.sum(T.mul(b, Tensor(w1))), T.sum(T.mul(b, Tensor(w2)))))
    assert np.array_equal(b.grad, g1 + g2)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        T.mul(Tensor([1e308]), Tensor([1e308]))


def test_scalar_value_roundtrip():
    s = Scalar(1.0, requires_grad=True, name="layer1.beta")
    s.value = 2.5
    assert s.value == 2.5 and s.data.shape == ()


def test_forward_determinism():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    r1 = T.relu(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.relu(T.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# -- finite-difference oracle ----------------------------------------------


def test_fd_check_quadratic():
    assert finite_difference_check(lambda x: T.sum(T.mul(x, x)), np.array([1.0, 2.0])) <= 1e-8


def test_fd_check_rejects_non_finite_input():
    with pytest.raises(NumericError):
        finite_difference_check(lambda x: T.sum(x), np.array([np.nan]))


@pytest.mark.parametrize("seed", range(3))
def test_matmul_and_mul_gradients(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.standard_normal((3, 3)))
    assert finite_difference_check(lambda a: T.sum(T.matmul(a, b)), rng.standard_normal((3, 3))) <= 1e-6
    w = Tensor(rng.standard_normal(6))
    assert finite_difference_check(lambda a: T.sum(T.mul(a, w)), rng.standard_normal(6)) <= 1e-6


def test_l2_norm_gradient_away_from_zero():
    x = np.random.default_rng(5).standard_normal((1, 8))
    assert finite_difference_check(lambda a: T.sum(T.l2_norm(a)), x) <= 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(6)
    g, s, w = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal((4, 5)))
    err = finite_difference_check(lambda a: T.sum(T.mul(T.layer_norm(a, g, s), w)), rng.standard_normal((4, 5)))
    assert err <= 1e-5


def test_softmax_and_msgnorm_fd_oracle():
    rng = np.random.default_rng(7)
    offsets = np.array([0, 3, 4, 8])
    x = rng.uniform(0.1, 2.0, (8, 3))
    err = finite_difference_check(lambda m: T.sum(agg_softmax(SegmentedMessages(m, offsets), 1.0)), x)
    assert err <= 1e-5
    h = Tensor(rng.standard_normal((4, 3)))
    err = finite_difference_check(lambda m: T.sum(msg_norm(h, m, 1.0)), rng.standard_normal((4, 3)))
    assert err <= 1e-5


def test_parameter_gradient_check_restores_values():
    rng = np.random.default_rng(8)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True, name="w")
    before = w.data.copy()
    x = Tensor(rng.standard_normal((4, 3)))
    errs = T.parameter_gradient_check(lambda: T.sum(T.relu(T.matmul(x, w))), [w])
    assert errs["w"] <= 1e-6
    assert np.array_equal(w.data, before)
