"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

The summary lines are collected into a final section of the pytest report. The
training-based criteria share cached models (module fixtures) so the whole file
finishes in a few minutes on one core.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from dicelab import cli
from dicelab import training
from dicelab.autodiff import Tape, Tensor
from dicelab.config import Schedule, TrainConfig
from dicelab.datagen import SpuriousTaskConfig, make_ood_shift, make_spurious_clusters
from dicelab.metrics import auroc, dice_times_w_confidence, ece, evaluate, fit_temperature, max_softmax, softmax_t
from dicelab.metrics import prediction_matrix
from dicelab.models import Architecture, EnsembleModel, ensemble_predict
from dicelab.optim import rmsprop_step
from dicelab.oracles import (
    check_bvc,
    check_diversity,
    check_enumeration,
    check_gradients,
    check_kl,
    check_ood,
    gaussian_cmi,
)
from dicelab.redundancy import (
    CrConfig,
    cr_estimate,
    cr_member_loss,
    discriminator_loss,
    draw_pair_features,
    sample_joint_batch,
    sample_product_batch,
)
from dicelab.training import init_run, train_run, train_step

SEEDS = range(5)


def report(n, ok, detail):
    print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- shared training setup ------------------------------------------------------

# Small training set, a strong shared nuisance channel and mild compression (log beta
# held at 5) so that members can still pick up the nuisance and redundancy has signal.
TASK = SpuriousTaskConfig(n_train=200, n_test=4000, seed=0, nuisance_scale=2.0)
EPOCHS = 40


def trend_cfg(variant, delta, seed, **over):
    E = EPOCHS
    return TrainConfig(
        variant=variant, delta=delta, M=4, epochs=E, batch_size=32, seed=seed,
        log_beta=Schedule([(0, 100.0), (1, 10.0), (E // 2, 5.0)]),
        delta_ramp=(0, E / 3), cov_ramp=(E / 3, 0.8 * E),
        lr=Schedule([(0, 0.05), (int(0.7 * E), 0.005)]),
        cr=CrConfig(num_s=2, nstep_d=2, neg_per_pos=2), **over,
    )


@pytest.fixture(scope="module")
def task():
    return make_spurious_clusters(TASK)


@pytest.fixture(scope="module")
def trend_models(task):
    tr, _ = task
    arms = {"CEB": ("CEB", 0.0), "DICE+": ("DICE", 0.2), "DICE-": ("DICE", -0.0625)}
    return {
        name: [train_run(trend_cfg(v, d, s), tr.x, tr.y, K=TASK.K).model for s in SEEDS]
        for name, (v, d) in arms.items()
    }


# -- criteria -------------------------------------------------------------------


def test_c01_gradients_match_finite_differences():
    t = time.perf_counter()
    worst = max(check_gradients(seed) for seed in range(5))
    dt = time.perf_counter() - t
    report(1, worst < 1e-4 and dt < 30, f"max rel err {worst:.2e} over 5 random tiny models in {dt:.1f}s")


def test_c02_kl_matches_monte_carlo():
    z, ident = check_kl(seed=0, n=1_000_000, pairs=20)
    report(2, z < 3.0 and ident == 0.0, f"worst |closed - MC| = {z:.2f} s.e., identity KL = {ident}")


def _cmi_batches(rho, n, rng, npp=4):
    y = rng.integers(0, 2, n)
    mu = np.array([-1.0, 1.0])[y]
    e1 = rng.standard_normal(n)
    e2 = rho * e1 + np.sqrt(1 - rho**2) * rng.standard_normal(n)
    draws = [Tensor((mu + e1)[:, None]), Tensor((mu + e2)[:, None])]
    return sample_joint_batch(draws, y), sample_product_batch(None, draws, y, np.arange(n), npp, rng)


def _train_cmi(rho, seed, steps=2000):
    rng = np.random.default_rng(seed)
    arch = Architecture(input_dim=1, d=1, K=2, M=2, hidden=(4,), discriminator="conditional",
                        disc_hidden=(64, 64, 32), disc_embed=16)
    model = EnsembleModel.init(arch, rng, np.random.default_rng([seed, 1]))
    names = model.disc.names()
    for _ in range(steps):
        j, p = _cmi_batches(rho, 256, rng)
        with Tape() as tape:
            g = tape.gradient(discriminator_loss(model, j, p), model.disc.tensors())
        rmsprop_step(model.disc, dict(zip(names, g)), 0.001, 0.9)
    j, p = _cmi_batches(rho, 20000, rng)
    return cr_estimate(model, j, p, 10.0)


@pytest.mark.slow
def test_c03_cmi_estimator_fidelity():
    target = gaussian_cmi(0.8)
    corr, indep, worst_t = [], [], 0.0
    for rho, out in ((0.8, corr), (0.0, indep)):
        for seed in SEEDS:
            t = time.perf_counter()
            out.append(_train_cmi(rho, seed))
            worst_t = max(worst_t, time.perf_counter() - t)
    ok = (all(abs(e - target) <= 0.1 for e in corr) and abs(np.median(indep)) < 0.05 and worst_t < 120)
    report(3, ok, f"rho=0.8 estimates {np.round(corr, 3).tolist()} vs {target:.3f}; "
                  f"independent median {np.median(indep):.1e}; slowest run {worst_t:.1f}s")


def test_c04_enumeration_oracle():
    worst = max(check_enumeration(seed) for seed in range(10))
    report(4, worst < 1e-6, f"max |estimate - enumerated CMI| = {worst:.1e} over 10 tables")


@pytest.mark.slow
def test_c05_diversity_trend(task, trend_models):
    _, te = task
    r, acc = {}, {}
    for name, models in trend_models.items():
        reps = [evaluate(m, te.x, te.y) for m in models]
        r[name] = float(np.median([rep.ratio_error for rep in reps]))
        acc[name] = float(np.median([rep.accuracy for rep in reps]))
    ok = r["DICE+"] > r["CEB"] > r["DICE-"] and acc["DICE+"] >= acc["CEB"] - 0.005
    report(5, ok, "median ratio-error " + ", ".join(f"{k} {v:.3f}" for k, v in r.items())
           + f"; accuracy DICE {acc['DICE+']:.4f} vs CEB {acc['CEB']:.4f}")


def _trajectory(cfg, x, y, steps=4):
    state = init_run(cfg, x.shape[1], int(y.max()) + 1)
    out = []
    for s in range(steps):
        idx = np.arange(s * 16, (s + 1) * 16) % len(y)
        train_step(state, x[idx], y[idx], idx, cfg, epoch=s)
        out.append(state.model.members.snapshot())
    return out


def test_c06_variant_lattice():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(64, 5)), rng.integers(0, 3, 64)
    small = dict(M=2, d=2, hidden=(8,), disc_hidden=(6, 4), disc_embed=3, seed=3,
                 cr=CrConfig(num_s=1, nstep_d=1, neg_per_pos=2), delta_ramp=(0.0, 1.0), cov_ramp=(0.0, 2.0))
    same = True
    for red, base in (("DICE", "CEB"), ("CEBR", "CEB"), ("IBR", "IB")):
        a = _trajectory(TrainConfig(variant=red, delta=0.0, **small), x, y)
        b = _trajectory(TrainConfig(variant=base, **small), x, y)
        same &= all(p.keys() == q.keys() and all(np.array_equal(p[k], q[k]) for k in p) for p, q in zip(a, b))
    report(6, same, "DICE/CEBR vs CEB and IBR vs IB bit-identical over 4 steps at delta=0")


def test_c07_bvc_identity():
    gap = check_bvc(seed=0, ensembles=100)
    report(7, gap < 1e-9, f"max relative |lhs - rhs| = {gap:.1e} over 100 ensembles")


@pytest.mark.slow
def test_c08_temperature_scaling(task, trend_models):
    _, te = task
    rng = np.random.default_rng(0)
    before, after, same_acc = [], [], True
    for models in trend_models.values():
        for m in models:
            _, scores = prediction_matrix(m, te.x, te.y)
            perm = rng.permutation(len(te.y))
            halves = (perm[: len(perm) // 2], perm[len(perm) // 2 :])
            for fit, held in (halves, halves[::-1]):
                T = fit_temperature(scores[fit], te.y[fit])
                p0, p1 = softmax_t(scores[held], 1.0), softmax_t(scores[held], T)
                same_acc &= bool(np.array_equal(p0.argmax(-1), p1.argmax(-1)))
                before.append(ece(p0, te.y[held]))
                after.append(ece(p1, te.y[held]))
    ok = same_acc and np.median(after) <= np.median(before)
    report(8, ok, f"predictions unchanged: {same_acc}; median ECE {np.median(before):.4f} -> "
                  f"{np.median(after):.4f} over {len(before)} held-out halves")


def test_c09_metric_oracles():
    o = check_ood(seed=0, sets=50)
    d = check_diversity(seed=0, sets=50)
    report(9, o < 1e-9 and d < 1e-12, f"OOD max abs err {o:.1e}; pairwise diversity max abs err {d:.1e}")


@pytest.mark.slow
def test_c10_dice_times_w_ordering(task):
    tr, te = task
    ood = make_ood_shift(TASK, 1.0, n=2000)
    base, scaled = [], []
    for seed in SEEDS:
        # DICE x w rescales averaged logits, so the baseline averages logits too
        m = train_run(trend_cfg("DICE", 0.2, seed, combine="logit"), tr.x, tr.y, K=TASK.K).model
        base.append(auroc(max_softmax(ensemble_predict(m, te.x)), max_softmax(ensemble_predict(m, ood.x))))
        scaled.append(auroc(dice_times_w_confidence(m, te.x)[0], dice_times_w_confidence(m, ood.x)[0]))
    ok = np.median(scaled) >= np.median(base)
    report(10, ok, f"median AUROC DICE x w {np.median(scaled):.4f} vs max softmax {np.median(base):.4f}")


def test_c11_gradient_isolation(monkeypatch):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(16, 5)), rng.integers(0, 3, 16)
    cfg = TrainConfig(variant="DICE", M=3, d=2, hidden=(8,), disc_hidden=(6, 4), disc_embed=3,
                      cr=CrConfig(num_s=2, nstep_d=2, neg_per_pos=2), delta_ramp=(0.0, 0.0))
    state = init_run(cfg, 5, 3)
    model = state.model

    m0 = model.members.snapshot()
    training._discriminator_phase(state, x, y, np.arange(16), cfg, 0.5, {})
    members_fixed = all(np.array_equal(model.members[k].data, v) for k, v in m0.items())

    d0 = model.disc.snapshot()
    with monkeypatch.context() as mp:
        mp.setattr(training, "_discriminator_phase", lambda *a, **k: None)
        train_step(state, x, y, np.arange(16), cfg, epoch=1)
    disc_fixed = all(np.array_equal(model.disc[k].data, v) for k, v in d0.items())

    scale_names = [n for n in model.members.names() if ".sigma." in n]
    eps = rng.normal(size=(3, 2, 16, 2))
    with Tape() as tape:
        gs = [m.encode(x) for m in model.member_list()]
        loss = cr_member_loss(model, sample_joint_batch(draw_pair_features(gs, eps, "predicted"), y))
        grads = tape.gradient(loss, [model.members[n] for n in scale_names])
    scale_zero = bool(scale_names) and all(not g.any() for g in grads)
    report(11, members_fixed and disc_fixed and scale_zero,
           f"members fixed by disc steps: {members_fixed}; disc fixed by member steps: {disc_fixed}; "
           f"covariance-head grads zero over {len(scale_names)} tensors: {scale_zero}")


def test_c12_replay_byte_identical(tmp_path):
    spec = {
        "version": 1, "name": "replay", "seeds": [0],
        "train": {"variant": "DICE", "M": 2, "d": 2, "hidden": [8], "disc_hidden": [6, 4], "disc_embed": 3,
                  "epochs": 2, "batch_size": 16, "delta_ramp": [0, 1], "cov_ramp": [0, 2],
                  "cr": {"num_s": 1, "nstep_d": 1, "neg_per_pos": 2}},
        "data": {"K": 3, "core_dim": 2, "nuisance_dim": 2, "n_train": 60, "n_test": 40},
        "metrics": {"dice_w": True},
    }
    p = tmp_path / "spec.yaml"
    p.write_text(yaml.safe_dump(spec))
    assert cli.main(["train", "--spec", str(p), "--out", str(tmp_path / "run")]) == 0
    assert cli.replay(tmp_path / "run", tmp_path / "again") == 0
    files = [f.name for f in Path(tmp_path / "run").iterdir() if f.name != "status.json"]
    same = all((tmp_path / "run" / f).read_bytes() == (tmp_path / "again" / f).read_bytes() for f in files)
    report(12, same, f"replayed run directory matches byte for byte ({len(files)} files)")
