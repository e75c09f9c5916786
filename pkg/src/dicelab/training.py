"""Ensemble training for every variant: Ind, IB, CEB, IBR, CEBR and DICE.

One call to :func:`train_step` performs

1. the per-member classification loss (cross-entropy, VIB or VCEB at the current beta),
2. for redundancy variants, the member-side redundancy loss summed over member pairs
   and weighted by ``delta / (M - 1)``, then a single member optimizer step,
3. ``nstep_d`` discriminator steps on freshly sampled joint / product batches,
   followed by the memory-bank update.

Randomness comes from independent streams (data order, member noise, adversarial
noise) spawned from the run seed, so switching the redundancy term on or off never
perturbs the member-side draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, Tape
from .config import TrainConfig
from .losses import deterministic_ce, vceb_terms, vib_terms
from .metrics import evaluate
from .models import Architecture, EnsembleModel, ramp_fraction
from .optim import rmsprop_step, sgd_nesterov_step
from .redundancy import (
    ClassMemoryBank,
    bce_from_logits,
    batch_logits,
    cr_member_loss,
    draw_pair_features,
    dv_estimate_from_logits,
    member_pairs,
    sample_joint_batch,
    sample_product_batch,
)

log = logging.getLogger(__name__)

STREAMS = ("data", "member_init", "disc_init", "member_noise", "adversarial", "eval")


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; ``snapshot`` holds the state at the failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def architecture_for(cfg: TrainConfig, input_dim: int, K: int) -> Architecture:
    return Architecture(
        input_dim=input_dim,
        d=cfg.d,
        K=K,
        M=cfg.M,
        hidden=cfg.hidden,
        structure=cfg.structure,
        backward=cfg.backward,
        discriminator=cfg.discriminator,
        disc_hidden=cfg.disc_hidden,
        disc_embed=cfg.disc_embed,
        disc_slope=cfg.disc_slope,
        combine=cfg.combine,
    )


@dataclass
class RunState:
    model: EnsembleModel
    bank: ClassMemoryBank | None
    rngs: dict[str, np.random.Generator]
    step: int = 0


def init_run(cfg: TrainConfig, input_dim: int, K: int) -> RunState:
    rngs = make_streams(cfg.seed)
    arch = architecture_for(cfg, input_dim, K)
    model = EnsembleModel.init(arch, rngs["member_init"], rngs["disc_init"])
    bank = ClassMemoryBank(cfg.M, K, cfg.d, cfg.bank_capacity) if cfg.has_redundancy else None
    return RunState(model, bank, rngs)


def _member_losses(model: EnsembleModel, cfg: TrainConfig, x, y, beta: float, noise) -> tuple[list, dict]:
    terms = []
    report: dict[str, list[float]] = {"ce": [], "kl": []}
    for m in model.member_list():
        if cfg.variant == "Ind":
            loss = deterministic_ce(m, x, y)
            report["ce"].append(float(loss.data))
        else:
            fn = vib_terms if cfg.variant in ("IB", "IBR") else vceb_terms
            t = fn(m, x, y, beta, noise[m.index])
            loss = t.total
            report["ce"].append(float(t.ce.data))
            report["kl"].append(float(t.kl.data))
        terms.append(loss)
    return terms, report


def _forward_is_degenerate(model: EnsembleModel, x) -> bool:
    """True when some member's features are non-finite or its scale has collapsed to 0."""
    with np.errstate(all="ignore"):
        for m in model.member_list():
            g = m.encode(x)
            if not (np.isfinite(g.mean.data).all() and np.isfinite(g.scale.data).all()):
                return True
            if np.any(g.scale.data <= 0):
                return True
    return False


def train_step(
    state: RunState,
    x: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    cfg: TrainConfig,
    epoch: float,
) -> dict:
    """One member update plus ``nstep_d`` discriminator updates; returns a step record."""
    model, bank, rngs = state.model, state.bank, state.rngs
    B, M, d = y.size, cfg.M, cfg.d
    beta = cfg.beta(epoch)
    delta = cfg.delta_at(epoch)
    cov = ramp_fraction(epoch, *cfg.cov_ramp)
    lr = cfg.lr(epoch)
    rec: dict = {"step": state.step, "epoch": epoch, "variant": cfg.variant, "beta": beta, "delta": delta,
                 "cov_ramp": cov, "lr": lr}

    noise = None if cfg.variant == "Ind" else rngs["member_noise"].standard_normal((M, B, d))
    member_params = model.members.tensors()
    names = model.members.names()
    with Tape() as tape:
        try:
            terms, parts = _member_losses(model, cfg, x, y, beta, noise)
        except ValueError as exc:
            if _forward_is_degenerate(model, x):
                raise TrainingAborted(f"degenerate member outputs: {exc}",
                                      {"record": rec, "members": model.members.snapshot()}) from exc
            raise
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        rec["member_loss"] = [float(t.data) for t in terms]
        rec.update(parts)
        if cfg.has_redundancy:
            eps = rngs["adversarial"].standard_normal((M, cfg.cr.num_s, B, d))
            gs = [m.encode(x) for m in model.member_list()]
            draws = draw_pair_features(gs, eps, cfg.cr_sampling, cov)
            joint = sample_joint_batch(draws, y, ids)
            product = None
            if cfg.cr.include_rhs:
                product = sample_product_batch(
                    bank, draws, y, ids, cfg.cr.neg_per_pos, rngs["adversarial"], cfg.discriminator == "conditional"
                )
            red = cr_member_loss(model, joint, product, cfg.cr.tau, cfg.cr.include_rhs and len(product) > 0)
            rec["redundancy_loss"] = float(red.data) / len(member_pairs(M))
            if delta != 0.0:
                loss = loss + red * (delta / (M - 1))
        rec["loss"] = float(loss.data)
        try:
            grads = tape.gradient(loss, member_params)
        except NonFiniteError as exc:
            raise TrainingAborted(str(exc), {"record": rec, "members": model.members.snapshot()}) from exc
    for g in grads:
        if not np.isfinite(g).all():
            raise TrainingAborted("non-finite member gradient", {"record": rec, "members": model.members.snapshot()})
    sgd_nesterov_step(model.members, dict(zip(names, grads)), lr, cfg.momentum, cfg.weight_decay)

    if cfg.has_redundancy:
        _discriminator_phase(state, x, y, ids, cfg, cov, rec)
    state.step += 1
    return rec


def _discriminator_phase(state: RunState, x, y, ids, cfg: TrainConfig, cov: float, rec: dict) -> None:
    model, bank, rng = state.model, state.bank, state.rngs["adversarial"]
    M, B, d = cfg.M, y.size, cfg.d
    gs = [m.encode(x).detach() for m in model.member_list()]
    conditional = cfg.discriminator == "conditional"
    disc_names = model.disc.names()
    disc_params = model.disc.tensors()
    losses, estimates, skipped = [], [], 0
    draws = None
    for _ in range(cfg.cr.nstep_d):
        eps = rng.standard_normal((M, cfg.cr.num_s, B, d))
        draws = draw_pair_features(gs, eps, cfg.cr_sampling, cov)
        joint = sample_joint_batch(draws, y, ids)
        product = sample_product_batch(bank, draws, y, ids, cfg.cr.neg_per_pos, rng, conditional)
        skipped += product.skipped
        if len(product) == 0:
            continue
        with Tape() as tape:
            lj = batch_logits(model, joint)
            lp = batch_logits(model, product)
            loss = bce_from_logits(lj, lp)
            try:
                grads = tape.gradient(loss, disc_params)
            except NonFiniteError as exc:
                raise TrainingAborted(str(exc), {"record": rec, "disc": model.disc.snapshot()}) from exc
        losses.append(float(loss.data))
        estimates.append(float(dv_estimate_from_logits(lj.detach(), lp.detach(), cfg.cr.tau).data))
        rmsprop_step(model.disc, dict(zip(disc_names, grads)), cfg.disc_lr, cfg.disc_decay)
    rec["disc_loss"] = float(np.mean(losses)) if losses else None
    rec["cr_estimate"] = float(np.mean(estimates)) if estimates else None
    rec["skipped"] = skipped
    if skipped:
        log.info("step %d: %d product rows skipped (empty pool)", state.step, skipped)
    bank.update([z.data[:B] for z in draws], y, ids)


@dataclass
class RunResult:
    state: RunState
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def model(self) -> EnsembleModel:
        return self.state.model


def train_run(
    cfg: TrainConfig,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    *,
    K: int | None = None,
    train_ids: np.ndarray | None = None,
    sink: Callable[[dict], None] | None = None,
    eval_every: int = 1,
) -> RunResult:
    """Train for ``cfg.epochs`` epochs; evaluate on the validation split after every
    ``eval_every`` epochs. ``sink`` receives every step and epoch record."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    K = K or int(train_y.max()) + 1
    ids = np.arange(train_y.size) if train_ids is None else np.asarray(train_ids)
    state = init_run(cfg, train_x.shape[1], K)
    result = RunResult(state)
    n = train_y.size
    for epoch in range(cfg.epochs):
        order = state.rngs["data"].permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rec = train_step(state, train_x[idx], train_y[idx], ids[idx], cfg, epoch)
            rec["kind"] = "step"
            if state.step % cfg.log_every == 0 or start + cfg.batch_size >= n:
                result.steps.append(rec)
                if sink:
                    sink(rec)
        if val_x is not None and val_y is not None and len(val_y) and ((epoch + 1) % eval_every == 0):
            rep = evaluate(state.model, val_x, val_y)
            erec = {"kind": "epoch", "epoch": epoch, "variant": cfg.variant, "step": state.step, **rep.to_dict()}
            result.epochs.append(erec)
            if sink:
                sink(erec)
    return result


def losses_are_finite(rec: dict) -> bool:
    vals = [rec.get("loss"), rec.get("disc_loss")]
    return all(v is None or math.isfinite(v) for v in vals)
