"""Independent reference computations and the self-check suite behind ``dicelab oracle``.

Everything here is deliberately naive (loops, enumeration, sampling) so that it
shares no code path with the implementations it checks.
"""

from __future__ import annotations

import math
import time
from itertools import product as iproduct
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .models import GaussianFeatures


# -- gradients -----------------------------------------------------------------


def finite_difference_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = float(fn().data)
            flat[k] = old - h
            down = float(fn().data)
            flat[k] = old
            g.reshape(-1)[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error ``|ga - gn| / max(|ga|, |gn|)`` over parameter tensors (norms)."""
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, list(params))
    numeric = finite_difference_grads(fn, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale < 1e-10:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


# -- KL ------------------------------------------------------------------------


def kl_monte_carlo(mean, scale, class_mean, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Sample estimate of KL(N(mean, diag scale^2) || N(class_mean, I)) and its standard error."""
    mean, scale, class_mean = (np.asarray(a, dtype=np.float64) for a in (mean, scale, class_mean))
    d = mean.size
    total = np.zeros(n)
    chunk = 200_000
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        eps = rng.standard_normal((m, d))
        z = mean + scale * eps
        log_q = -0.5 * (eps**2).sum(1) - np.log(scale).sum() - 0.5 * d * math.log(2 * math.pi)
        log_p = -0.5 * ((z - class_mean) ** 2).sum(1) - 0.5 * d * math.log(2 * math.pi)
        total[start : start + m] = log_q - log_p
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n))


# -- conditional mutual information ---------------------------------------------


def enumerated_cmi(p: np.ndarray) -> float:
    """I(Z1; Z2 | Y) in nats for a joint table ``p[z1, z2, y]``."""
    p = np.asarray(p, dtype=np.float64)
    p = p / p.sum()
    total = 0.0
    for a, b, y in iproduct(*(range(s) for s in p.shape)):
        if p[a, b, y] == 0:
            continue
        py = p[:, :, y].sum()
        pa = p[a, :, y].sum()
        pb = p[:, b, y].sum()
        total += p[a, b, y] * math.log(p[a, b, y] * py / (pa * pb))
    return total


def enumeration_batches(counts: np.ndarray):
    """Joint / product rows with exact integer multiplicities for a count table
    ``counts[z1, z2, y]``, plus an exact log-likelihood-ratio critic.

    Returns ``(joint, product, critic)`` where the batches are
    :class:`~dicelab.redundancy.PairBatch` objects with 1-d features.
    """
    from .redundancy import PairBatch

    c = np.asarray(counts, dtype=np.int64)
    A, B, Y = c.shape
    ny = c.sum(axis=(0, 1))
    na = c.sum(axis=1)  # (A, Y)
    nb = c.sum(axis=0)  # (B, Y)
    L = math.lcm(*[int(v) for v in ny if v > 0])
    j_rows, p_rows = [], []
    for a, b, y in iproduct(range(A), range(B), range(Y)):
        j_rows += [(a, b, y)] * int(c[a, b, y]) * L
        if ny[y]:
            w = na[a, y] * nb[b, y] * L // ny[y]  # n(a,y) n(b,y) / n(y), scaled to an integer
            p_rows += [(a, b, y)] * int(w)

    def batch(rows):
        r = np.asarray(rows, dtype=np.float64)
        n = len(rows)
        zeros, ones = np.zeros(n, np.int64), np.ones(n, np.int64)
        idx = np.arange(n)
        return PairBatch(Tensor(r[:, :1]), Tensor(r[:, 1:2]), zeros, ones, r[:, 2].astype(np.int64), idx, idx, zeros)

    def critic(za, zb, slot_a, slot_b, y):
        a = np.asarray(za).reshape(-1).astype(int)
        b = np.asarray(zb).reshape(-1).astype(int)
        y = np.asarray(y).astype(int)
        # log p(a, b | y) / (p(a | y) p(b | y))
        return np.log(c[a, b, y] * ny[y] / (na[a, y] * nb[b, y]))

    return batch(j_rows), batch(p_rows), critic


def gaussian_cmi(rho: float) -> float:
    """I(Z1; Z2 | Y) for unit-variance Gaussians with conditional correlation ``rho``."""
    return -0.5 * math.log(1.0 - rho**2)


# -- OOD and diversity -----------------------------------------------------------


def brute_force_ood(in_scores, out_scores) -> dict[str, float]:
    pos = [float(s) for s in np.ravel(in_scores)]
    neg = [float(s) for s in np.ravel(out_scores)]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    thresholds = sorted(set(pos) | set(neg), reverse=True)
    tprs, fprs, precs = [], [], []
    for t in thresholds:
        tp = sum(p >= t for p in pos)
        fp = sum(n >= t for n in neg)
        tprs.append(tp / len(pos))
        fprs.append(fp / len(neg))
        precs.append(tp / (tp + fp))
    ap_in, prev = 0.0, 0.0
    for r, pr in zip(tprs, precs):
        ap_in += (r - prev) * pr
        prev = r
    # AUPR-out: out-samples as positives, lower score = more OOD
    out_thr = sorted(set(neg) | set(pos))
    ap_out, prev = 0.0, 0.0
    for t in out_thr:
        tp = sum(n <= t for n in neg)
        fp = sum(p <= t for p in pos)
        r = tp / len(neg)
        ap_out += (r - prev) * tp / (tp + fp)
        prev = r
    fpr95 = min(f for r, f in zip(tprs, fprs) if r >= 0.95)
    det = min([0.5] + [0.5 * (1 - r) + 0.5 * f for r, f in zip(tprs, fprs)])
    return {"auroc": wins / (len(pos) * len(neg)), "aupr_in": ap_in, "aupr_out": ap_out, "fpr95": fpr95,
            "detection_error": det}


def enumerated_pairwise(correct: np.ndarray, preds: np.ndarray) -> dict[str, float]:
    """Ratio error, Q statistic and agreement by looping over pairs and inputs."""
    M, N = correct.shape
    ratios, qs, agrees = [], [], []
    for i in range(M):
        for j in range(i + 1, M):
            n11 = n10 = n01 = n00 = 0
            same = 0
            for k in range(N):
                ci, cj = bool(correct[i, k]), bool(correct[j, k])
                n11 += ci and cj
                n10 += ci and not cj
                n01 += cj and not ci
                n00 += (not ci) and (not cj)
                same += preds[i, k] == preds[j, k]
            ratios.append((n10 + n01) / n00 if n00 else math.inf)
            den = n11 * n00 + n01 * n10
            qs.append((n11 * n00 - n01 * n10) / den if den else 0.0)
            agrees.append(same / N)
    return {"ratio_error": sum(ratios) / len(ratios), "q_statistic": sum(qs) / len(qs), "agreement": sum(agrees) / len(agrees)}


# -- suite ---------------------------------------------------------------------


def _tiny_member(seed: int, backward: str | None = "class"):
    from .models import Architecture, EnsembleModel

    rng = np.random.default_rng(seed)
    arch = Architecture(input_dim=3, d=2, K=3, M=2, hidden=(4,), backward=backward, discriminator="conditional",
                        disc_hidden=(5, 4, 3), disc_embed=2)
    model = EnsembleModel.init(arch, rng, rng)
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 3, 5)
    return model, x, y, rng


def check_gradients(seed: int = 0) -> float:
    from .losses import deterministic_ce, vceb_loss, vib_loss
    from .redundancy import cr_member_loss, draw_pair_features, sample_joint_batch

    worst = 0.0
    model, x, y, rng = _tiny_member(seed)
    m = model.member(0)
    noise = rng.standard_normal((5, 2))
    params = [model.members[n] for n in m.param_names()]
    worst = max(worst, gradient_check(lambda: deterministic_ce(m, x, y), params))
    worst = max(worst, gradient_check(lambda: vceb_loss(m, x, y, 3.0, noise), params))
    model_b, *_ = _tiny_member(seed, "marginal")
    mb = model_b.member(0)
    worst = max(worst, gradient_check(lambda: vib_loss(mb, x, y, 3.0, noise),
                                      [model_b.members[n] for n in mb.param_names()]))
    eps = rng.standard_normal((2, 2, 5, 2))

    # the sampling scale is a constant inside the redundancy loss, so differentiate
    # with unit scale where the two computations coincide
    def cr():
        gs = [mm.encode(x) for mm in model.member_list()]
        return cr_member_loss(model, sample_joint_batch(draw_pair_features(gs, eps, "unit"), y), tau=10.0)

    return max(worst, gradient_check(cr, model.members.tensors()))


def check_kl(seed: int = 0, n: int = 1_000_000, pairs: int = 20) -> tuple[float, float]:
    """(worst |closed - MC| in standard errors, closed form at identity)."""
    from .losses import kl_diag_gaussian_to_unit_class

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        d = 3
        mu, cm = rng.normal(0, 1, d), rng.normal(0, 1, d)
        sc = rng.uniform(0.3, 2.0, d)
        g = GaussianFeatures(Tensor(mu[None]), Tensor(sc[None]))
        closed = float(kl_diag_gaussian_to_unit_class(g, Tensor(cm[None])).data[0])
        est, se = kl_monte_carlo(mu, sc, cm, n, rng)
        worst = max(worst, abs(closed - est) / se)
    ident = GaussianFeatures(Tensor(cm[None]), Tensor(np.ones((1, d))))
    return worst, float(kl_diag_gaussian_to_unit_class(ident, Tensor(cm[None])).data[0])


def check_enumeration(seed: int = 0) -> float:
    from .redundancy import cr_estimate

    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 6, size=(2, 2, 2))
    joint, prod, critic = enumeration_batches(counts)
    return abs(cr_estimate(critic, joint, prod, tau=None) - enumerated_cmi(counts))


def check_ood(seed: int = 0, sets: int = 50) -> float:
    from .metrics import ood_scores

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(sets):
        pos = np.round(rng.normal(1, 1, rng.integers(5, 40)), 1)
        neg = np.round(rng.normal(0, 1, rng.integers(5, 40)), 1)
        a, b = ood_scores(pos, neg), brute_force_ood(pos, neg)
        worst = max(worst, max(abs(a[k] - b[k]) for k in b))
    return worst


def check_diversity(seed: int = 0, sets: int = 50) -> float:
    from .metrics import PredictionMatrix, agreement, q_statistic, ratio_error

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(sets):
        M, N, K = int(rng.integers(2, 5)), int(rng.integers(5, 30)), 3
        labels = rng.integers(0, K, N)
        preds = np.where(rng.random((M, N)) < 0.6, labels, rng.integers(0, K, (M, N)))
        pm = PredictionMatrix.from_predictions(preds, labels, K)
        ref = enumerated_pairwise(preds == labels, preds)
        got = {"ratio_error": ratio_error(pm), "q_statistic": q_statistic(pm), "agreement": agreement(pm)}
        for k in ref:
            if math.isinf(ref[k]) or math.isinf(got[k]):
                worst = max(worst, 0.0 if ref[k] == got[k] else math.inf)
            else:
                worst = max(worst, abs(ref[k] - got[k]))
    return worst


def check_bvc(seed: int = 0, ensembles: int = 100) -> float:
    from .metrics import bvc_decomposition

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(ensembles):
        R, M, P = int(rng.integers(2, 20)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        f = rng.normal(rng.normal(), rng.uniform(0.1, 2), (R, M, P))
        out = bvc_decomposition(f, rng.normal(size=P))
        worst = max(worst, abs(out["lhs"] - out["rhs"]) / max(abs(out["lhs"]), 1e-300))
    return worst


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []

    def record(name, ok, detail, t0):
        results.append((name, bool(ok), f"{detail} ({time.perf_counter() - t0:.1f}s)"))

    t = time.perf_counter()
    g = check_gradients(seed)
    record("gradients vs finite differences", g < 1e-4, f"max rel err {g:.2e}", t)
    t = time.perf_counter()
    z, ident = check_kl(seed, n=200_000)
    record("KL closed form vs Monte Carlo", z < 3.0 and ident == 0.0, f"worst {z:.2f} s.e., identity {ident}", t)
    t = time.perf_counter()
    e = check_enumeration(seed)
    record("CMI estimate vs enumeration", e < 1e-6, f"abs err {e:.2e}", t)
    t = time.perf_counter()
    o = check_ood(seed)
    record("OOD scores vs threshold sweep", o < 1e-9, f"max abs err {o:.2e}", t)
    t = time.perf_counter()
    dv = check_diversity(seed)
    record("pairwise diversity vs enumeration", dv < 1e-12, f"max abs err {dv:.2e}", t)
    t = time.perf_counter()
    b = check_bvc(seed)
    record("bias-variance-covariance identity", b < 1e-9, f"max rel gap {b:.2e}", t)
    return results
