"""Proper scoring rules, calibration errors and two-fold temperature scaling."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .. import _kernels

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _check(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a nonempty (N, K) probability matrix")
    if labels.shape != (probs.shape[0],):
        raise ValueError("one label per row expected")
    return probs, labels


def nll(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def brier(probs, labels) -> float:
    """Mean squared error to the one-hot target, averaged over inputs and classes."""
    probs, labels = _check(probs, labels)
    onehot = np.eye(probs.shape[1])[labels]
    return float(np.mean((probs - onehot) ** 2))


def ece(probs, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width bins of the top-class confidence."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _check(probs, labels)
    conf = probs.max(axis=1)
    hit = (probs.argmax(axis=1) == labels).astype(np.float64)
    _, sconf, shit = _kernels.active.bin_stats(conf, hit, bins)
    return float(np.abs(shit - sconf).sum() / labels.size)


def tace(probs, labels, bins: int = 15, threshold: float = 1e-3) -> float:
    """Thresholded adaptive calibration error.

    For every class, probabilities above ``threshold`` are sorted and cut into
    ``bins`` equal-mass bins; the result is ``1/(K*bins)`` times the summed
    ``|accuracy - confidence|`` over nonempty bins.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _check(probs, labels)
    K = probs.shape[1]
    total = 0.0
    for k in range(K):
        p = probs[:, k]
        keep = np.flatnonzero(p > threshold)
        if keep.size == 0:
            continue
        order = keep[np.argsort(p[keep], kind="stable")]
        for chunk in np.array_split(order, bins):
            if chunk.size:
                total += abs(np.mean(labels[chunk] == k) - np.mean(p[chunk]))
    return total / (K * bins)


def softmax_t(logits, T: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-8) -> float:
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(logits, labels, log_range: tuple[float, float] = (-3.0, 3.0)) -> float:
    """Temperature minimizing held-out NLL of ``softmax(logits / T)``, searched over log T."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty half")
    if np.unique(labels).size < 2:
        raise ValueError("temperature fit needs at least two classes present")
    u = golden_section(lambda u: nll(softmax_t(logits, math.exp(u)), labels), *log_range)
    return math.exp(u)


def calibration_metrics(probs, labels, bins: int = 15, threshold: float = 1e-3) -> dict[str, float]:
    probs, labels = _check(probs, labels)
    return {
        "acc": float((probs.argmax(axis=1) == labels).mean()),
        "nll": nll(probs, labels),
        "brier": brier(probs, labels),
        "ece": ece(probs, labels, bins),
        "tace": tace(probs, labels, bins, threshold),
    }


def two_fold_temperature_scaling(
    logits,
    labels,
    rng: np.random.Generator,
    bins: int = 15,
    threshold: float = 1e-3,
) -> dict[str, float]:
    """Split into random halves; fit T on one half, score the other, and average.

    Returns ``T`` (mean of the two fits) plus ``<metric>`` after scaling and
    ``<metric>_raw`` on the same halves without scaling.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    perm = rng.permutation(labels.size)
    halves = (perm[: labels.size // 2], perm[labels.size // 2 :])
    out: dict[str, list[float]] = {}
    for fit_idx, eval_idx in (halves, halves[::-1]):
        T = fit_temperature(logits[fit_idx], labels[fit_idx])
        out.setdefault("T", []).append(T)
        for k, v in calibration_metrics(softmax_t(logits[eval_idx], T), labels[eval_idx], bins, threshold).items():
            out.setdefault(k, []).append(v)
        for k, v in calibration_metrics(softmax_t(logits[eval_idx], 1.0), labels[eval_idx], bins, threshold).items():
            out.setdefault(k + "_raw", []).append(v)
    return {k: float(np.mean(v)) for k, v in out.items()}
