"""Out-of-distribution detection scores and confidence functions."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .. import autodiff as ad
from ..models import EnsembleModel, discriminator_logits, ensemble_predict, member_logits, softmax
from ..redundancy import member_pairs


def _sweep(pos: np.ndarray, neg: np.ndarray):
    """TPR/FPR/precision at every distinct threshold, highest first (predict positive if s >= t)."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    s, lab = scores[order], is_pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(1.0 - lab)[last]
    return tp / pos.size, fp / neg.size, tp / (tp + fp)


def _average_precision(pos: np.ndarray, neg: np.ndarray) -> float:
    tpr, _, prec = _sweep(pos, neg)
    return float(np.sum(np.diff(np.r_[0.0, tpr]) * prec))


def auroc(in_scores, out_scores) -> float:
    """Probability that an in-distribution score beats an OOD score, ties count half."""
    pos = np.asarray(in_scores, dtype=np.float64)
    neg = np.asarray(out_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def ood_scores(in_scores, out_scores) -> dict[str, float]:
    """AUROC, AUPR-in, AUPR-out, FPR at 95% TPR and detection error.

    Higher scores mean "more in-distribution".
    """
    pos = np.asarray(in_scores, dtype=np.float64).ravel()
    neg = np.asarray(out_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be nonempty")
    tpr, fpr, _ = _sweep(pos, neg)
    at95 = np.flatnonzero(tpr >= 0.95)[0]
    # the empty threshold (+inf) predicts nothing positive: error 0.5
    det = min(0.5, float(np.min(0.5 * (1.0 - tpr) + 0.5 * fpr)))
    return {
        "auroc": auroc(pos, neg),
        "aupr_in": _average_precision(pos, neg),
        "aupr_out": _average_precision(-neg, -pos),
        "fpr95": float(fpr[at95]),
        "detection_error": det,
    }


def max_softmax(probs) -> np.ndarray:
    return np.asarray(probs).max(axis=-1)


def dice_times_w_confidence(model: EnsembleModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Confidence after scaling the averaged logits by the mean over member pairs of ``1 - w``.

    ``w`` is evaluated on mean features with the ensemble's predicted class. Returns
    ``(confidence, scale)``, both of shape (n,).
    """
    if model.M < 2:
        raise ValueError("DICE x w needs at least two members")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_hat = ensemble_predict(model, x).argmax(axis=-1)
    means = [m.encode(x).mean.data for m in model.member_list()]
    n = x.shape[0]
    scale = np.zeros(n)
    pairs = member_pairs(model.M)
    for i, j in pairs:
        logit = discriminator_logits(model, means[i], means[j], np.full(n, i), np.full(n, j), y_hat)
        scale += 1.0 - ad.sigmoid(logit).data
    scale /= len(pairs)
    avg_logits = member_logits(model, x).mean(axis=0)
    return softmax(scale[:, None] * avg_logits).max(axis=-1), scale
