"""Neural estimation of (conditional) redundancy between member features.

A discriminator is trained to tell *joint* pairs (both features from one input)
from *product* pairs (features from two different inputs of the same class, or of
any class for the unconditional variant). Its odds ``w / (1 - w)``, clipped with
``exp(tau * tanh(log f / tau))``, feed a Donsker-Varadhan estimate; the members
minimize the joint-side mean of ``log f``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import EnsembleModel, GaussianFeatures, discriminator_logits, sample_features

log = logging.getLogger(__name__)


@dataclass
class CrConfig:
    tau: float | None = 10.0
    num_s: int = 4
    neg_per_pos: int = 4
    nstep_d: int = 4
    include_rhs: bool = False

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive (or None for no clipping)")
        if self.num_s < 1 or self.neg_per_pos < 1 or self.nstep_d < 1:
            raise ValueError("num_s, neg_per_pos and nstep_d must be >= 1")


@dataclass
class PairBatch:
    """Rows ``(za in slot_a, zb in slot_b, y)``; ``src``/``dst`` are the input ids behind za/zb."""

    za: Tensor
    zb: Tensor
    slot_a: np.ndarray
    slot_b: np.ndarray
    y: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    pair: np.ndarray  # index into the list of member pairs, per row
    skipped: int = 0

    def __len__(self) -> int:
        return int(self.y.size)

    def detached(self) -> "PairBatch":
        return replace(self, za=self.za.detach(), zb=self.zb.detach())


class ClassMemoryBank:
    """Ring buffers of recent feature draws, one per (member, class), ``capacity`` deep."""

    def __init__(self, M: int, K: int, d: int, capacity: int = 4):
        self.M, self.K, self.d, self.capacity = M, K, d, capacity
        self.features = np.zeros((M, K, capacity, d))
        self.ids = np.full((M, K, capacity), -1, dtype=np.int64)
        self._next = np.zeros((M, K), dtype=np.int64)

    @property
    def size(self) -> int:
        return int((self.ids >= 0).sum())

    def push(self, member: int, features: np.ndarray, labels: np.ndarray, ids: np.ndarray) -> None:
        features = np.asarray(features, dtype=np.float64)
        for f, y, i in zip(features, np.asarray(labels), np.asarray(ids)):
            slot = self._next[member, y] % self.capacity
            self.features[member, y, slot] = f
            self.ids[member, y, slot] = i
            self._next[member, y] += 1

    def update(self, draws: list[np.ndarray], labels: np.ndarray, ids: np.ndarray) -> None:
        """End-of-step hook: store one (B, d) draw per member."""
        for j, z in enumerate(draws):
            self.push(j, z, labels, ids)

    def entries(self, member: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Filled slots of ``member``: (features (n, d), input ids (n,), classes (n,))."""
        mask = self.ids[member] >= 0
        cls = np.broadcast_to(np.arange(self.K)[:, None], mask.shape)[mask]
        return self.features[member][mask], self.ids[member][mask], cls

    def state(self) -> dict[str, np.ndarray]:
        return {"features": self.features.copy(), "ids": self.ids.copy(), "next": self._next.copy()}


def member_pairs(M: int) -> list[tuple[int, int]]:
    return list(combinations(range(M), 2))


def draw_pair_features(
    gs: list[GaussianFeatures],
    noise: np.ndarray,
    scale_mode: str = "ramped",
    ramp: float = 1.0,
) -> list[Tensor]:
    """``num_s`` draws per input for every member, each a (num_s * B, d) tensor (draw-major).

    The scale enters as a constant: no gradient reaches the covariance head.
    ``noise`` has shape (M, num_s, B, d).
    """
    out = []
    for g, eps in zip(gs, noise):
        s, b, d = eps.shape
        tile = np.tile(np.arange(b), s)
        rep = GaussianFeatures(ad.index(g.mean, tile), Tensor(g.scale.data[tile]))
        out.append(sample_features(rep, eps.reshape(s * b, d), scale_mode, ramp))
    return out


def sample_joint_batch(draws: list[Tensor], labels, ids=None) -> PairBatch:
    """Every unordered member pair (i < j) on every draw of every input, same-input features."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.size
    if b == 0:
        raise ValueError("need at least one input")
    ids = np.arange(b) if ids is None else np.asarray(ids, dtype=np.int64)
    rows = draws[0].shape[0]
    s = rows // b
    pairs = member_pairs(len(draws))
    za = ad.concat([draws[i] for i, _ in pairs], axis=0)
    zb = ad.concat([draws[j] for _, j in pairs], axis=0)
    n = rows * len(pairs)
    slot_a = np.repeat([i for i, _ in pairs], rows)
    slot_b = np.repeat([j for _, j in pairs], rows)
    y = np.tile(np.tile(labels, s), len(pairs))
    src = np.tile(np.tile(ids, s), len(pairs))
    pair = np.repeat(np.arange(len(pairs)), rows)
    assert za.shape[0] == n
    return PairBatch(za, zb, slot_a, slot_b, y, src, src.copy(), pair)


def _draw_partners(row_ids, row_cls, pool_ids, pool_cls, k: int, rng, conditional: bool):
    """``k`` uniform draws per row from the pool entries with a different input id (and
    the same class when ``conditional``). Returns (pool indices (n_keep * k,), kept rows)."""
    groups = np.unique(row_cls) if conditional else [None]
    chosen, kept = [], []
    for c in groups:
        rows = np.flatnonzero(row_cls == c) if conditional else np.arange(row_ids.size)
        pool = np.flatnonzero(pool_cls == c) if conditional else np.arange(pool_ids.size)
        # rows whose pool holds only their own input are dropped
        uid, cnt = np.unique(pool_ids[pool], return_counts=True)
        own = np.zeros(rows.size, np.int64)
        if uid.size:
            pos = np.searchsorted(uid, row_ids[rows]).clip(max=uid.size - 1)
            hit = uid[pos] == row_ids[rows]
            own[hit] = cnt[pos[hit]]
        rows = rows[pool.size - own > 0]
        if rows.size == 0:
            continue
        pick = pool[rng.integers(0, pool.size, (rows.size, k))]
        bad = pool_ids[pick] == row_ids[rows][:, None]
        while bad.any():
            pick[bad] = pool[rng.integers(0, pool.size, int(bad.sum()))]
            bad = pool_ids[pick] == row_ids[rows][:, None]
        chosen.append(pick)
        kept.append(rows)
    if not kept:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    kept_rows = np.concatenate(kept)
    order = np.argsort(kept_rows, kind="stable")
    return np.concatenate(chosen)[order].reshape(-1), kept_rows[order]


def sample_product_batch(
    bank: ClassMemoryBank | None,
    draws: list[Tensor],
    labels,
    ids,
    neg_per_pos: int,
    rng: np.random.Generator,
    conditional: bool = True,
) -> PairBatch:
    """``neg_per_pos`` product rows per joint row, partners drawn uniformly from a pool.

    For joint row (i, j, input n, class y) the pool holds member j's current draws of
    other inputs and member j's bank entries, restricted to class y when
    ``conditional``; entries of input n itself are never eligible. Rows whose pool is
    empty are skipped and counted in ``skipped``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    b = labels.size
    rows = draws[0].shape[0]
    s = rows // b
    row_cls = np.tile(labels, s)
    row_ids = np.tile(ids, s)
    parts = {k: [] for k in ("za", "zb", "sa", "sb", "y", "src", "dst", "pair")}
    skipped = 0
    for p, (i, j) in enumerate(member_pairs(len(draws))):
        pool_z = draws[j]
        pool_ids, pool_cls = row_ids, row_cls
        if bank is not None:
            bf, bid, bcls = bank.entries(j)
            if bid.size:
                pool_z = ad.concat([draws[j], Tensor(bf)], axis=0)
                pool_ids = np.concatenate([row_ids, bid])
                pool_cls = np.concatenate([row_cls, bcls])
        chosen, keep = _draw_partners(row_ids, row_cls, pool_ids, pool_cls, neg_per_pos, rng, conditional)
        n_skip = rows - keep.size
        if n_skip:
            skipped += n_skip * neg_per_pos
            log.debug("pair %s: %d rows without a product partner", (i, j), n_skip)
        if keep.size == 0:
            continue
        src_rows = np.repeat(keep, neg_per_pos)
        parts["za"].append(ad.index(draws[i], src_rows))
        parts["zb"].append(ad.index(pool_z, chosen))
        parts["sa"].append(np.full(src_rows.size, i))
        parts["sb"].append(np.full(src_rows.size, j))
        parts["y"].append(row_cls[src_rows])
        parts["src"].append(row_ids[src_rows])
        parts["dst"].append(pool_ids[chosen])
        parts["pair"].append(np.full(src_rows.size, p))
    if not parts["za"]:
        d = draws[0].shape[1]
        empty = np.zeros(0, dtype=np.int64)
        return PairBatch(Tensor(np.zeros((0, d))), Tensor(np.zeros((0, d))), empty, empty, empty, empty, empty, empty, skipped)
    return PairBatch(
        ad.concat(parts["za"], axis=0),
        ad.concat(parts["zb"], axis=0),
        np.concatenate(parts["sa"]),
        np.concatenate(parts["sb"]),
        np.concatenate(parts["y"]),
        np.concatenate(parts["src"]),
        np.concatenate(parts["dst"]),
        np.concatenate(parts["pair"]),
        skipped,
    )


# -- ratio clipping and estimates -----------------------------------------------


def clipped_log_ratio(logit, tau: float | None) -> Tensor:
    """``tau * tanh(a / tau)`` where ``a = log(w / (1 - w))`` is the discriminator logit."""
    logit = ad.as_tensor(logit)
    if tau is None or math.isinf(tau):
        return logit
    return ad.tanh(logit * (1.0 / tau)) * tau


def clipped_ratio(w_out, tau: float | None) -> np.ndarray:
    """``exp(tau * tanh(log(w / (1 - w)) / tau))`` for probabilities strictly inside (0, 1)."""
    w = np.asarray(w_out, dtype=np.float64)
    if np.any((w <= 0) | (w >= 1)):
        raise ValueError("discriminator output must lie strictly in (0, 1)")
    a = np.log(w) - np.log1p(-w)
    return np.exp(clipped_log_ratio(a, tau).data)


def bce_from_logits(logit_joint, logit_product) -> Tensor:
    """Cross-entropy with joint rows labelled 1 and product rows 0, averaged over the union."""
    lj, lp = ad.as_tensor(logit_joint), ad.as_tensor(logit_product)
    n = lj.size + lp.size
    if lj.size == 0 or lp.size == 0:
        raise ValueError("both batches must be nonempty")
    return (ad.softplus(-lj).sum() + ad.softplus(lp).sum()) * (1.0 / n)


def _log_mean_exp(t: Tensor) -> Tensor:
    m = float(t.data.max())
    return ad.log(ad.exp(t - m).mean()) + m


def dv_estimate_from_logits(logit_joint, logit_product, tau: float | None) -> Tensor:
    """``mean_joint log f - log mean_product f`` with clipped ``f``."""
    lj, lp = ad.as_tensor(logit_joint), ad.as_tensor(logit_product)
    if lj.size == 0 or lp.size == 0:
        raise ValueError("both batches must be nonempty")
    return clipped_log_ratio(lj, tau).mean() - _log_mean_exp(clipped_log_ratio(lp, tau))


def batch_logits(model, batch: PairBatch, frozen: bool = False) -> Tensor:
    """Discriminator logits for ``batch``. ``model`` may also be a plain critic
    ``f(za, zb, slot_a, slot_b, y) -> logits`` (e.g. an exact likelihood ratio)."""
    if not isinstance(model, EnsembleModel):
        return ad.as_tensor(model(batch.za.data, batch.zb.data, batch.slot_a, batch.slot_b, batch.y))
    return discriminator_logits(model, batch.za, batch.zb, batch.slot_a, batch.slot_b, batch.y, frozen)


def discriminator_loss(model: EnsembleModel, joint: PairBatch, product: PairBatch) -> Tensor:
    """Discriminator training loss; features are used as constants."""
    return bce_from_logits(batch_logits(model, joint.detached()), batch_logits(model, product.detached()))


def cr_estimate(model: EnsembleModel, joint: PairBatch, product: PairBatch, tau: float | None) -> float:
    """Donsker-Varadhan estimate of the redundancy seen by the discriminator, in nats."""
    lj = batch_logits(model, joint.detached(), frozen=True)
    lp = batch_logits(model, product.detached(), frozen=True)
    return float(dv_estimate_from_logits(lj, lp, tau).data)


def cr_member_loss(
    model: EnsembleModel,
    joint: PairBatch,
    product: PairBatch | None = None,
    tau: float | None = 10.0,
    include_rhs: bool = False,
) -> Tensor:
    """Sum over member pairs of the joint-side mean ``log f`` (minus ``log mean f`` on
    product rows when ``include_rhs``). The discriminator is frozen."""
    if len(joint) == 0:
        raise ValueError("empty joint batch")
    logf_j = clipped_log_ratio(batch_logits(model, joint, frozen=True), tau)
    logf_p = None
    if include_rhs:
        if product is None or len(product) == 0:
            raise ValueError("include_rhs needs a nonempty product batch")
        logf_p = clipped_log_ratio(batch_logits(model, product, frozen=True), tau)
    total = None
    for p in np.unique(joint.pair):
        term = ad.index(logf_j, np.flatnonzero(joint.pair == p)).mean()
        if logf_p is not None:
            rows = np.flatnonzero(product.pair == p)
            if rows.size:
                term = term - _log_mean_exp(ad.index(logf_p, rows))
        total = term if total is None else total + term
    return total


# unconditional redundancy: same machinery, unconditional discriminator + any-class partners
r_member_loss = cr_member_loss
r_estimate = cr_estimate
