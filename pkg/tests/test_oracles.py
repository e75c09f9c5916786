import math

import numpy as np
import pytest

from dicelab import oracles
from dicelab.metrics import PredictionMatrix, agreement, ood_scores, q_statistic, ratio_error


def test_gaussian_cmi_value():
    assert oracles.gaussian_cmi(0.8) == pytest.approx(0.5108, abs=1e-4)
    assert oracles.gaussian_cmi(0.0) == 0.0


def test_enumerated_cmi_cases():
    # Z1 = Z2 uniform bits given each Y: ln 2
    copy = np.zeros((2, 2, 2))
    copy[0, 0], copy[1, 1] = 1, 1
    assert oracles.enumerated_cmi(copy) == pytest.approx(math.log(2), rel=1e-14)
    indep = np.einsum("ay,by->aby", np.array([[0.2, 0.6], [0.8, 0.4]]), np.array([[0.5, 0.1], [0.5, 0.9]]))
    assert abs(oracles.enumerated_cmi(indep)) < 1e-15
    # marginally dependent through Y but independent given Y
    assert abs(oracles.enumerated_cmi(indep * np.array([0.3, 0.7]))) < 1e-15


def test_enumeration_batches_multiplicities():
    counts = np.array([[[1, 0], [1, 2]], [[0, 3], [2, 1]]])
    joint, prod, _ = oracles.enumeration_batches(counts)
    # both batches represent the same class marginal
    assert np.bincount(joint.y).tolist() == np.bincount(prod.y).tolist()


def test_kl_monte_carlo_agrees_with_closed_form():
    est, se = oracles.kl_monte_carlo([1.0], [1.0], [0.0], 200_000, np.random.default_rng(0))
    assert abs(est - 0.5) < 4 * se
    est, se = oracles.kl_monte_carlo([0.0], [2.0], [0.0], 200_000, np.random.default_rng(1))
    assert abs(est - 0.5 * (4 - math.log(4) - 1)) < 4 * se


def test_brute_force_ood_matches_library(rng):
    for _ in range(5):
        pos, neg = rng.integers(0, 6, 9) / 2.0, rng.integers(0, 6, 7) / 2.0
        a, b = ood_scores(pos, neg), oracles.brute_force_ood(pos, neg)
        for k in a:
            assert a[k] == pytest.approx(b[k], abs=1e-12), k


def test_enumerated_pairwise_matches_library(rng):
    labels = rng.integers(0, 3, 25)
    preds = np.where(rng.random((3, 25)) < 0.5, labels, rng.integers(0, 3, (3, 25)))
    pm = PredictionMatrix.from_predictions(preds, labels, 3)
    ref = oracles.enumerated_pairwise(pm.correct, preds)
    assert ratio_error(pm) == pytest.approx(ref["ratio_error"])
    assert q_statistic(pm) == pytest.approx(ref["q_statistic"])
    assert agreement(pm) == pytest.approx(ref["agreement"])


def test_finite_difference_on_known_function():
    from dicelab.autodiff import Tensor

    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (g,) = oracles.finite_difference_grads(lambda: (w * w).sum(), [w])
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
    assert oracles.gradient_check(lambda: (w * w).sum(), [w]) < 1e-8


def test_run_all_passes():
    results = oracles.run_all(seed=1)
    assert len(results) == 6
    assert all(ok for _, ok, _ in results), results
