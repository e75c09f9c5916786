"""Bias-variance-covariance decomposition of an ensemble's squared error."""

from __future__ import annotations

import numpy as np


def bvc_decomposition(outputs, target) -> dict[str, float]:
    """Empirical decomposition over resamples.

    ``outputs`` has shape (R, M) or (R, M, P): R resamples (training sets / seeds), M
    members, P evaluation points. Expectations are population means over the R axis;
    terms are then averaged over points. Returns ``bias2``, ``var``, ``covar``, the
    left side ``E[(fbar - t)^2]`` as ``lhs`` and ``bias2 + var/M + (1 - 1/M) covar`` as
    ``rhs``. With M = 1 the covariance term is reported as 0.
    """
    f = np.asarray(outputs, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    if f.ndim != 3:
        raise ValueError("outputs must have shape (R, M) or (R, M, P)")
    R, M, P = f.shape
    if R < 2:
        raise ValueError("need at least two resamples")
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), (P,))
    mean_i = f.mean(axis=0)  # (M, P)
    dev = f - mean_i  # (R, M, P)
    bias = (mean_i - t).mean(axis=0)  # (P,)
    var = (dev**2).mean(axis=0).mean(axis=0)
    if M > 1:
        cov = np.einsum("rip,rjp->ijp", dev, dev) / R  # (M, M, P)
        off = cov.sum(axis=(0, 1)) - np.trace(cov, axis1=0, axis2=1)
        covar = off / (M * (M - 1))
    else:
        covar = np.zeros(P)
    lhs = ((f.mean(axis=1) - t) ** 2).mean(axis=0)
    rhs = bias**2 + var / M + (1.0 - 1.0 / M) * covar
    return {
        "bias2": float(np.mean(bias**2)),
        "var": float(np.mean(var)),
        "covar": float(np.mean(covar)),
        "lhs": float(np.mean(lhs)),
        "rhs": float(np.mean(rhs)),
    }
