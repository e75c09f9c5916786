"""Pairwise and non-pairwise ensemble diversity measures over member predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import _kernels


@dataclass
class PredictionMatrix:
    """Per-member probabilities (M, N, K) and the true labels (N,).

    ``ensemble`` overrides the combined prediction (e.g. logit averaging); by default
    it is the mean of the member probabilities.
    """

    probs: np.ndarray
    labels: np.ndarray
    ensemble: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 3:
            raise ValueError("probs must have shape (M, N, K)")
        if self.probs.shape[1] != self.labels.size:
            raise ValueError("one label per evaluation input expected")
        if not np.allclose(self.probs.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("probability rows must sum to 1")

    @classmethod
    def from_predictions(cls, preds, labels, K: int | None = None) -> "PredictionMatrix":
        """Build one-hot probabilities from hard (M, N) predictions."""
        preds = np.asarray(preds, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        K = K or int(max(preds.max(), labels.max())) + 1
        return cls(np.eye(K)[preds], labels)

    @property
    def M(self) -> int:
        return self.probs.shape[0]

    @property
    def N(self) -> int:
        return self.probs.shape[1]

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)

    @property
    def correct(self) -> np.ndarray:
        return self.preds == self.labels[None, :]

    @property
    def ensemble_probs(self) -> np.ndarray:
        return self.probs.mean(axis=0) if self.ensemble is None else self.ensemble


def _pairs(pm: PredictionMatrix) -> tuple[np.ndarray, np.ndarray]:
    if pm.M < 2:
        raise ValueError("pairwise measures need at least two members")
    return np.triu_indices(pm.M, k=1)


def ratio_error(pm: PredictionMatrix) -> float:
    """Mean over member pairs of N_single / N_shared; a pair with no shared error gives +inf."""
    a, b = _pairs(pm)
    n11, n10, n01, n00 = _kernels.active.pair_counts(pm.correct)
    single = (n10 + n01)[a, b].astype(np.float64)
    shared = n00[a, b].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(shared > 0, single / np.where(shared > 0, shared, 1.0), math.inf)
    return float(r.mean())


def q_statistic(pm: PredictionMatrix) -> float:
    """Mean Yule Q over pairs of correctness vectors; 0/0 counts as 0."""
    a, b = _pairs(pm)
    n11, n10, n01, n00 = (t[a, b].astype(np.float64) for t in _kernels.active.pair_counts(pm.correct))
    num = n11 * n00 - n01 * n10
    den = n11 * n00 + n01 * n10
    q = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return float(q.mean())


def agreement(pm: PredictionMatrix) -> float:
    """Mean over pairs of the fraction of inputs where both predicted classes coincide."""
    a, b = _pairs(pm)
    p = pm.preds
    return float(np.mean([(p[i] == p[j]).mean() for i, j in zip(a, b)]))


def kohavi_wolpert_variance(pm: PredictionMatrix) -> float:
    c = pm.correct.sum(axis=0).astype(np.float64)
    return float(np.mean(c * (pm.M - c)) / pm.M**2)


def entropy_diversity(pm: PredictionMatrix) -> float:
    if pm.M < 2:
        raise ValueError("entropy diversity needs at least two members")
    c = pm.correct.sum(axis=0)
    return float(np.mean(np.minimum(c, pm.M - c)) / (pm.M - math.ceil(pm.M / 2)))


def individual_accuracy(pm: PredictionMatrix) -> np.ndarray:
    return pm.correct.mean(axis=1)


def ensemble_accuracy(pm: PredictionMatrix) -> float:
    return float((pm.ensemble_probs.argmax(axis=-1) == pm.labels).mean())
