import numpy as np
import pytest

from streams.optimizers import SGD, Adam, build_optimizer
from utils.errors import InvalidParam, NonFiniteLoss
from utils.tensor import Tensor


def quadratic_step(optimizer, param):
    optimizer.zero_grad()
    (param * param).sum().backward()
    optimizer.step()


def test_sgd_plain_step():
    w = Tensor([1.0, -2.0], requires_grad=True)
    quadratic_step(SGD({"w": w}, learning_rate=0.1), w)
    np.testing.assert_allclose(w.data, [0.8, -1.6])


def test_sgd_momentum_accumulates():
    w = Tensor([1.0], requires_grad=True)
    optimizer = SGD({"w": w}, learning_rate=0.1, momentum=0.5)
    quadratic_step(optimizer, w)
    quadratic_step(optimizer, w)
    # v1 = 2.0 -> w = 0.8; v2 = 0.5 * 2.0 + 1.6 = 2.6 -> w = 0.54
    assert w.data[0] == pytest.approx(0.54)


def test_adam_first_step_has_learning_rate_magnitude():
    w = Tensor([3.0, -0.5], requires_grad=True)
    quadratic_step(Adam({"w": w}, learning_rate=0.01), w)
    np.testing.assert_allclose(w.data, [2.99, -0.49], atol=1e-7)


def test_adam_bias_correction_over_two_steps():
    w = Tensor([1.0], requires_grad=True)
    optimizer = Adam({"w": w}, learning_rate=0.1)
    quadratic_step(optimizer, w)
    # g=2: m_hat = 0.2/0.1 = 2, v_hat = 0.004/0.001 = 4 -> step 0.1 * 2 / (2 + 1e-8)
    assert w.data[0] == pytest.approx(0.9000000005, abs=1e-12)
    quadratic_step(optimizer, w)
    # g=1.800000001: m_hat = 0.3600000001/0.19, v_hat = 0.0072360000036/0.001999
    assert w.data[0] == pytest.approx(0.80041223, abs=1e-7)


def test_adam_descends():
    w = Tensor([2.0], requires_grad=True)
    optimizer = build_optimizer("adam", {"w": w}, 0.1)
    for _ in range(50):
        quadratic_step(optimizer, w)
    assert abs(w.data[0]) < 1.0
    assert optimizer.step_count == 50


@pytest.mark.parametrize("name", ["adam", "sgd"])
def test_zero_learning_rate_leaves_weights(name):
    w = Tensor([1.5, -0.25], requires_grad=True)
    before = w.data.tobytes()
    optimizer = build_optimizer(name, {"w": w}, 0.0)
    for _ in range(3):
        quadratic_step(optimizer, w)
    assert w.data.tobytes() == before


def test_non_finite_gradient():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([np.inf])
    with pytest.raises(NonFiniteLoss):
        SGD({"w": w}, learning_rate=0.1).step()


@pytest.mark.parametrize("lr", [-0.1, float("nan")])
def test_invalid_learning_rate(lr):
    with pytest.raises(InvalidParam):
        SGD({}, learning_rate=lr)


def test_unknown_optimizer():
    with pytest.raises(InvalidParam):
        build_optimizer("rmsprop", {}, 0.1)
