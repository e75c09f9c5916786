"""Evaluation: diversity, uncertainty, calibration, OOD and BVC diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..models import EnsembleModel, combine_logits, member_logits, softmax
from .bvc import bvc_decomposition
from .calibration import (
    brier,
    calibration_metrics,
    ece,
    fit_temperature,
    nll,
    softmax_t,
    tace,
    two_fold_temperature_scaling,
)
from .diversity import (
    PredictionMatrix,
    agreement,
    ensemble_accuracy,
    entropy_diversity,
    individual_accuracy,
    kohavi_wolpert_variance,
    q_statistic,
    ratio_error,
)
from .ood import auroc, dice_times_w_confidence, max_softmax, ood_scores

__all__ = [
    "MetricsReport",
    "PredictionMatrix",
    "agreement",
    "auroc",
    "brier",
    "bvc_decomposition",
    "calibration_metrics",
    "dice_times_w_confidence",
    "ece",
    "ensemble_accuracy",
    "entropy_diversity",
    "evaluate",
    "fit_temperature",
    "individual_accuracy",
    "kohavi_wolpert_variance",
    "max_softmax",
    "nll",
    "ood_scores",
    "prediction_matrix",
    "q_statistic",
    "ratio_error",
    "softmax_t",
    "tace",
    "two_fold_temperature_scaling",
]


@dataclass
class MetricsReport:
    accuracy: float
    individual_accuracy: float
    ratio_error: float | None = None
    q_statistic: float | None = None
    agreement: float | None = None
    kw_variance: float | None = None
    entropy_diversity: float | None = None
    nll: float | None = None
    brier: float | None = None
    ece: float | None = None
    tace: float | None = None
    temperature: float | None = None
    nll_ts: float | None = None
    brier_ts: float | None = None
    ece_ts: float | None = None
    tace_ts: float | None = None
    ood: dict[str, dict[str, float]] = field(default_factory=dict)
    bvc: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def prediction_matrix(model: EnsembleModel, x, y) -> tuple[PredictionMatrix, np.ndarray]:
    """Prediction matrix plus the ensemble log-scores used for temperature scaling."""
    logits = member_logits(model, x)
    scores = combine_logits(logits, model.arch.combine)
    return PredictionMatrix(softmax(logits), y, ensemble=softmax(scores)), scores


def evaluate(
    model: EnsembleModel,
    x,
    y,
    *,
    ts_rng: np.random.Generator | None = None,
    ood_x=None,
    dice_w: bool = False,
    bins: int = 15,
) -> MetricsReport:
    """Full report on (x, y); temperature scaling only when ``ts_rng`` is given, OOD
    scores only when ``ood_x`` is given (plus DICE x w when ``dice_w``)."""
    pm, scores = prediction_matrix(model, x, y)
    probs = pm.ensemble_probs
    rep = MetricsReport(
        accuracy=ensemble_accuracy(pm),
        individual_accuracy=float(individual_accuracy(pm).mean()),
        nll=nll(probs, pm.labels),
        brier=brier(probs, pm.labels),
        ece=ece(probs, pm.labels, bins),
        tace=tace(probs, pm.labels, bins),
        kw_variance=kohavi_wolpert_variance(pm),
    )
    if pm.M >= 2:
        rep.ratio_error = ratio_error(pm)
        rep.q_statistic = q_statistic(pm)
        rep.agreement = agreement(pm)
        rep.entropy_diversity = entropy_diversity(pm)
    if ts_rng is not None:
        ts = two_fold_temperature_scaling(scores, pm.labels, ts_rng, bins)
        rep.temperature = ts["T"]
        rep.nll_ts, rep.brier_ts, rep.ece_ts, rep.tace_ts = ts["nll"], ts["brier"], ts["ece"], ts["tace"]
    if ood_x is not None:
        out_probs = softmax(combine_logits(member_logits(model, ood_x), model.arch.combine))
        rep.ood["max_softmax"] = ood_scores(max_softmax(probs), max_softmax(out_probs))
        if dice_w and model.disc is not None and model.M >= 2:
            c_in, _ = dice_times_w_confidence(model, x)
            c_out, _ = dice_times_w_confidence(model, ood_x)
            rep.ood["dice_x_w"] = ood_scores(c_in, c_out)
    return rep


def is_inf(v) -> bool:
    return isinstance(v, float) and math.isinf(v)
