import numpy as np
import pytest

from dicelab import training
from dicelab.autodiff import Tape
from dicelab.config import Schedule, TrainConfig
from dicelab.losses import deterministic_ce, vceb_terms
from dicelab.optim import sgd_nesterov_step
from dicelab.redundancy import CrConfig, cr_member_loss, draw_pair_features, sample_joint_batch
from dicelab.training import TrainingAborted, init_run, make_streams, train_run, train_step


def small_cfg(**kw):
    base = dict(
        M=2, d=2, hidden=(8,), disc_hidden=(6, 4), disc_embed=3, epochs=2, batch_size=16, seed=3,
        log_beta=Schedule([(0, 2.0), (1, 1.0)]), delta=0.3, delta_ramp=(0.0, 1.0), cov_ramp=(0.5, 1.5),
        cr=CrConfig(num_s=2, neg_per_pos=2, nstep_d=2), lr=Schedule([(0, 0.05)]),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def data():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 3, 48)
    x = rng.normal(size=(48, 5)) + y[:, None]
    return x, y


def member_trajectory(cfg, x, y, steps=6):
    state = init_run(cfg, x.shape[1], 3)
    out = [state.model.members.snapshot()]
    order = np.arange(len(y))
    for s in range(steps):
        idx = order[(s * 16) % 48 : (s * 16) % 48 + 16]
        train_step(state, x[idx], y[idx], idx, cfg, epoch=s / 3)
        out.append(state.model.members.snapshot())
    return out


def assert_same_traj(a, b):
    for sa, sb in zip(a, b):
        assert sa.keys() == sb.keys()
        for k in sa:
            np.testing.assert_array_equal(sa[k], sb[k])


@pytest.mark.parametrize("red, base", [("DICE", "CEB"), ("CEBR", "CEB"), ("IBR", "IB")])
def test_variant_lattice_delta_zero(data, red, base):
    x, y = data
    assert_same_traj(member_trajectory(small_cfg(variant=red, delta=0.0), x, y),
                     member_trajectory(small_cfg(variant=base), x, y))


def test_early_ramp_step_equals_ceb(data):
    # ramp starting later: delta(step) == 0 for the first steps
    x, y = data
    a = member_trajectory(small_cfg(variant="DICE", delta_ramp=(5.0, 6.0)), x, y, steps=3)
    b = member_trajectory(small_cfg(variant="CEB"), x, y, steps=3)
    assert_same_traj(a, b)


def test_nonzero_delta_changes_trajectory(data):
    x, y = data
    a = member_trajectory(small_cfg(variant="DICE"), x, y, steps=3)
    b = member_trajectory(small_cfg(variant="CEB"), x, y, steps=3)
    assert any(not np.array_equal(a[-1][k], b[-1][k]) for k in a[-1])


def test_dice_step_matches_hand_composition(data):
    x, y = data
    cfg = small_cfg(variant="DICE", delta_ramp=(0.0, 0.0))
    state = init_run(cfg, 5, 3)
    model = state.model
    xb, yb, ids = x[:16], y[:16], np.arange(16)
    rngs = make_streams(cfg.seed)
    noise = rngs["member_noise"].standard_normal((2, 16, 2))
    eps = rngs["adversarial"].standard_normal((2, 2, 16, 2))
    with Tape():
        total = sum(float(vceb_terms(m, xb, yb, cfg.beta(0), noise[m.index]).total.data) for m in model.member_list())
        gs = [m.encode(xb) for m in model.member_list()]
        joint = sample_joint_batch(draw_pair_features(gs, eps, "ramped", 0.0), yb, ids)
        red = float(cr_member_loss(model, joint, tau=10.0).data)
    rec = train_step(state, xb, yb, ids, cfg, epoch=0)
    assert rec["loss"] == pytest.approx(total + cfg.delta / (cfg.M - 1) * red, rel=1e-12, abs=1e-12)
    assert rec["delta"] == cfg.delta


def test_ind_equals_independent_steps(data):
    x, y = data
    cfg = small_cfg(variant="Ind", M=3)
    state = init_run(cfg, 5, 3)
    ref = init_run(cfg, 5, 3).model
    xb, yb = x[:16], y[:16]
    train_step(state, xb, yb, np.arange(16), cfg, epoch=0)
    for m in ref.member_list():
        names = m.param_names()
        with Tape() as tape:
            g = tape.gradient(deterministic_ce(m, xb, yb), [ref.members[n] for n in names])
        sub = {n: gi for n, gi in zip(names, g)}
        sgd_nesterov_step(ref.members, sub, cfg.lr(0), cfg.momentum, cfg.weight_decay)
    for k, v in ref.members.snapshot().items():
        np.testing.assert_allclose(state.model.members[k].data, v, rtol=0, atol=1e-15)
    assert state.bank is None and state.model.disc is None


def test_discriminator_phase_leaves_members(data):
    x, y = data
    cfg = small_cfg(variant="DICE")
    state = init_run(cfg, 5, 3)
    before_m = state.model.members.snapshot()
    before_d = state.model.disc.snapshot()
    training._discriminator_phase(state, x[:16], y[:16], np.arange(16), cfg, 0.5, {})
    for k, v in before_m.items():
        np.testing.assert_array_equal(state.model.members[k].data, v)
    assert any(not np.array_equal(state.model.disc[k].data, v) for k, v in before_d.items())


def test_member_step_leaves_discriminator(data, monkeypatch):
    x, y = data
    cfg = small_cfg(variant="DICE")
    state = init_run(cfg, 5, 3)
    before = state.model.disc.snapshot()
    monkeypatch.setattr(training, "_discriminator_phase", lambda *a, **k: None)
    train_step(state, x[:16], y[:16], np.arange(16), cfg, epoch=2)
    for k, v in before.items():
        np.testing.assert_array_equal(state.model.disc[k].data, v)


def test_member_redundancy_step_decreases_loss(data):
    x, y = data
    cfg = small_cfg(variant="DICE")
    state = init_run(cfg, 5, 3)
    # warm the discriminator a little so it is not trivially flat
    for _ in range(3):
        training._discriminator_phase(state, x[:16], y[:16], np.arange(16), cfg, 0.0, {})
    model = state.model
    eps = np.random.default_rng(0).standard_normal((2, 2, 16, 2))

    def red():
        gs = [m.encode(x[:16]) for m in model.member_list()]
        return cr_member_loss(model, sample_joint_batch(draw_pair_features(gs, eps, "predicted"), y[:16]))

    with Tape() as tape:
        loss = red()
        grads = tape.gradient(loss, model.members.tensors())
    l0 = float(loss.data)
    names = model.members.names()
    for lr in (1e-3, 1e-4, 1e-5):
        snap = model.members.snapshot()
        for n, g in zip(names, grads):
            model.members[n].data = model.members[n].data - lr * g
        with Tape():
            l1 = float(red().data)
        model.members.load(snap)
        assert l1 < l0


def test_zero_epochs_returns_init(data):
    x, y = data
    cfg = small_cfg(variant="DICE", epochs=0)
    res = train_run(cfg, x, y, K=3)
    init = init_run(cfg, 5, 3).model
    for k, v in init.members.snapshot().items():
        np.testing.assert_array_equal(res.model.members[k].data, v)
    assert res.steps == [] and res.state.step == 0


def test_determinism_and_records(data):
    x, y = data
    cfg = small_cfg(variant="DICE")
    seen = []
    a = train_run(cfg, x[:40], y[:40], x[40:], y[40:], K=3, sink=seen.append)
    b = train_run(cfg, x[:40], y[:40], x[40:], y[40:], K=3)
    assert a.steps == b.steps and a.epochs == b.epochs
    assert len(a.epochs) == 2 and len(a.steps) == 2 * 3
    assert seen == [r for r in seen if r["kind"] in ("step", "epoch")]
    rec = a.steps[-1]
    for key in ("ce", "kl", "redundancy_loss", "disc_loss", "cr_estimate", "beta", "delta", "cov_ramp", "lr"):
        assert key in rec
    assert all(training.losses_are_finite(r) for r in a.steps)


def test_eval_cadence(data):
    x, y = data
    res = train_run(small_cfg(variant="CEB", epochs=4), x[:40], y[:40], x[40:], y[40:], K=3, eval_every=2)
    assert [e["epoch"] for e in res.epochs] == [1, 3]


def test_nonfinite_input_aborts(data):
    x, y = data
    x = x.copy()
    x[0, 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train_run(small_cfg(variant="CEB"), x, y, K=3)
    assert "members" in info.value.snapshot and "record" in info.value.snapshot


def test_streams_independent():
    a, b = make_streams(0), make_streams(0)
    assert a["data"].random() == b["data"].random()
    assert make_streams(0)["data"].random() != make_streams(0)["member_noise"].random()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_parameters_abort(data):
    x, y = data
    cfg = small_cfg(variant="CEB")
    state = init_run(cfg, 5, 3)
    for name in state.model.members.names():
        state.model.members[name].data = np.full_like(state.model.members[name].data, 1e200)
    with pytest.raises(TrainingAborted, match="not finite"):
        train_step(state, x[:16], y[:16], np.arange(16), cfg, epoch=0)


def test_collapsed_scale_aborts(data):
    x, y = data
    cfg = small_cfg(variant="CEB")
    state = init_run(cfg, 5, 3)
    bias = [n for n in state.model.members.names() if ".sigma." in n and n.endswith("b")]
    assert bias
    for name in bias:
        state.model.members[name].data = np.full_like(state.model.members[name].data, -1e5)
    with pytest.raises(TrainingAborted, match="degenerate"):
        train_step(state, x[:16], y[:16], np.arange(16), cfg, epoch=0)
