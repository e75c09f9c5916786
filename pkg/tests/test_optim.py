import math

import numpy as np
import pytest

from dicelab.optim import RMSPROP_EPS, ParamSet, rmsprop_step, sgd_nesterov_step


def ps(v):
    return ParamSet({"p": np.array(v, dtype=float)})


def test_nesterov_without_momentum_is_gradient_descent():
    p = ps([1.0, -2.0])
    sgd_nesterov_step(p, {"p": np.array([0.5, 1.0])}, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(p["p"].data, [0.95, -2.1], rtol=0, atol=1e-15)


def test_zero_gradient_leaves_params():
    p = ps([1.0, 2.0])
    sgd_nesterov_step(p, {"p": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["p"].data, [1.0, 2.0])
    rmsprop_step(p, {"p": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["p"].data, [1.0, 2.0])


def test_nesterov_two_steps_match_recurrence():
    p = ps([0.0])
    lr, mu = 0.1, 0.9
    val, v = 0.0, 0.0
    for _ in range(2):
        sgd_nesterov_step(p, {"p": np.array([1.0])}, lr, mu)
        v = mu * v + 1.0
        val -= lr * (1.0 + mu * v)
    assert p["p"].data[0] == pytest.approx(val, abs=1e-15)
    assert val == pytest.approx(-0.19 - 0.1 * (1 + 0.9 * 1.9))


def test_weight_decay_enters_gradient():
    p = ps([2.0])
    sgd_nesterov_step(p, {"p": np.array([0.0])}, lr=0.1, momentum=0.0, weight_decay=0.5)
    assert p["p"].data[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_rmsprop_first_step_closed_form():
    p = ps([0.0])
    rmsprop_step(p, {"p": np.array([1.0])}, lr=0.01, decay_rate=0.9)
    assert p["p"].data[0] == pytest.approx(-0.01 / math.sqrt(0.1 + RMSPROP_EPS), rel=1e-14)


def test_rmsprop_constant_gradient_step_tends_to_lr_sign():
    for g in (3.0, -0.2):
        p = ps([0.0])
        prev = 0.0
        for _ in range(300):
            rmsprop_step(p, {"p": np.array([g])}, lr=0.01, decay_rate=0.9)
            step = p["p"].data[0] - prev
            prev = p["p"].data[0]
        assert step == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-6)


def test_shape_mismatch_and_bad_hyperparameters():
    p = ps([1.0, 2.0])
    with pytest.raises(ValueError):
        sgd_nesterov_step(p, {"p": np.zeros(3)}, lr=0.1)
    with pytest.raises(ValueError):
        rmsprop_step(p, {"p": np.zeros((2, 1))}, lr=0.1)
    with pytest.raises(KeyError):
        sgd_nesterov_step(p, {"q": np.zeros(2)}, lr=0.1)
    with pytest.raises(ValueError):
        sgd_nesterov_step(p, {"p": np.zeros(2)}, lr=0.0)
    with pytest.raises(ValueError):
        sgd_nesterov_step(p, {"p": np.zeros(2)}, lr=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        rmsprop_step(p, {"p": np.zeros(2)}, lr=0.1, decay_rate=1.0)


def test_optimizer_state_shapes_and_determinism():
    rng = np.random.default_rng(0)
    grads = [{"p": rng.normal(size=(2, 3))} for _ in range(5)]
    runs = []
    for _ in range(2):
        p = ParamSet({"p": np.ones((2, 3))})
        for g in grads:
            sgd_nesterov_step(p, g, 0.05, 0.9, 1e-3)
        assert p.state["p"].shape == (2, 3)
        runs.append(p["p"].data.copy())
    np.testing.assert_array_equal(runs[0], runs[1])
