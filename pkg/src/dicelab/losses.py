"""Classification losses with variational bottlenecks (VCEB, VIB) and their closed-form KL."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import GaussianFeatures, Member, sample_features


class LossTerms(NamedTuple):
    total: Tensor
    kl: Tensor  # batch mean of the KL term, before the 1/beta weight
    ce: Tensor  # batch mean of the sampled cross-entropy


def kl_diag_gaussian_to_unit_class(g: GaussianFeatures, class_mean) -> Tensor:
    """Row-wise KL( N(mean, diag scale^2) || N(class_mean, I) ), shape (n,).

    Equals ``0.5 * sum(scale^2 - log scale^2 - 1 + (mean - class_mean)^2)``.
    """
    if np.any(g.scale.data <= 0):
        raise ValueError("scale must be strictly positive")
    s2 = ad.square(g.scale)
    diff = g.mean - class_mean
    per_dim = s2 - 2.0 * ad.log(g.scale) - 1.0 + ad.square(diff)
    return 0.5 * per_dim.sum(axis=-1)


def _check_labels(logits: Tensor, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    k = logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"class index out of range for {k} classes")
    return y


def cross_entropy_rows(logits, y) -> Tensor:
    """``-log softmax(logits)[y]`` per row, shape (n,)."""
    logits = ad.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    y = _check_labels(logits, y)
    if y.size != logits.shape[0]:
        raise ValueError("one label per row expected")
    return -ad.index(ad.log_softmax(logits), (np.arange(y.size), y))


def cross_entropy(logits, y) -> Tensor:
    """Mean cross-entropy over rows."""
    return cross_entropy_rows(logits, y).mean()


def _bottleneck(member: Member, x, y, beta: float, noise, marginal: bool) -> LossTerms:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size == 0:
        raise ValueError("empty batch")
    if not beta > 0:
        raise ValueError("beta must be positive")
    g = member.encode(x)
    z = sample_features(g, noise, "predicted")
    ce = cross_entropy_rows(member.classify(z), y).mean()
    table = member.model.members[f"{member.prefix}.back"]
    target = ad.index(table, np.zeros_like(y) if marginal else y)
    kl = kl_diag_gaussian_to_unit_class(g, target).mean()
    if math.isinf(beta):
        return LossTerms(ce, kl, ce)
    return LossTerms(kl * (1.0 / beta) + ce, kl, ce)


def vceb_terms(member: Member, x, y, beta: float, noise) -> LossTerms:
    if member.model.arch.backward != "class":
        raise ValueError("VCEB needs a class-conditional backward table")
    return _bottleneck(member, x, y, beta, noise, marginal=False)


def vib_terms(member: Member, x, y, beta: float, noise) -> LossTerms:
    if member.model.arch.backward is None:
        raise ValueError("VIB needs a backward marginal")
    # with a class table (K=1 degenerate case) the first row acts as the marginal
    return _bottleneck(member, x, y, beta, noise, marginal=True)


def vceb_loss(member: Member, x, y, beta: float, noise) -> Tensor:
    """Batch mean of ``KL(e(z|x) || b(z|y)) / beta - log c(y|z)`` with one reparameterized draw."""
    return vceb_terms(member, x, y, beta, noise).total


def vib_loss(member: Member, x, y, beta: float, noise) -> Tensor:
    """As :func:`vceb_loss` but every example is pulled toward one shared Gaussian."""
    return vib_terms(member, x, y, beta, noise).total


def deterministic_ce(member: Member, x, y) -> Tensor:
    """Cross-entropy of the classifier applied to the mean features (no sampling)."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size == 0:
        raise ValueError("empty batch")
    return cross_entropy(member.classify(member.encode(x).mean), y)
