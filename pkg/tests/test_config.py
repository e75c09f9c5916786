import math

import pytest

from dicelab.config import PRESETS, Schedule, TrainConfig, preset, ramp, schedule_value
from dicelab.redundancy import CrConfig


def test_schedule_examples():
    s = Schedule([(0, 1.0), (10, 2.0)])
    assert s(0) == 1.0 and s(10) == 2.0
    assert s(5) == 1.0
    assert s(1e6) == 2.0
    lin = Schedule([(0, 0.0), (80, 0.2)], "linear-ramp")
    assert lin(40) == pytest.approx(0.1, abs=1e-15)
    assert lin(200) == 0.2


def test_schedule_before_first_anchor_and_errors():
    assert Schedule([(5, 3.0)])(1) == 3.0
    with pytest.raises(ValueError):
        Schedule([])
    with pytest.raises(ValueError):
        Schedule([(0, 1.0), (0, 2.0)])
    with pytest.raises(ValueError):
        Schedule([(0, 1.0)], "cubic")
    with pytest.raises(ValueError):
        schedule_value(Schedule([(0, 1.0)]), -1)


def test_ramp_helper():
    r = ramp(2, 6, 0.4)
    assert r(0) == 0.0 and r(2) == 0.0 and r(4) == pytest.approx(0.2) and r(10) == 0.4
    assert ramp(0, 0, 0.3)(0) == 0.3


def test_beta_mapping():
    cfg = TrainConfig(variant="CEB", log_beta=Schedule([(0, 2.0), (3, 1.0)]))
    assert cfg.beta(0) == pytest.approx(math.exp(2.0))
    assert cfg.beta(3.5) == pytest.approx(math.e)
    ib = TrainConfig(variant="IB", log_beta=Schedule([(0, 2.0)]))
    assert ib.beta(0) == pytest.approx(math.exp(2.0) + 1)


def test_delta_absent_for_non_redundancy_variants():
    for v in ("Ind", "IB", "CEB"):
        assert TrainConfig(variant=v, delta=0.5).delta_at(100) == 0.0
    cfg = TrainConfig(variant="DICE", delta=0.2, delta_ramp=(0, 8))
    assert cfg.delta_at(4) == pytest.approx(0.1)
    assert cfg.delta_at(100) == 0.2


def test_variant_wiring():
    assert TrainConfig(variant="DICE").discriminator == "conditional"
    assert TrainConfig(variant="CEBR").discriminator == "unconditional"
    assert TrainConfig(variant="CEB").discriminator is None
    assert TrainConfig(variant="IBR").backward == "marginal"
    assert TrainConfig(variant="Ind").backward is None


def test_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="Foo")
    with pytest.raises(ValueError):
        TrainConfig(variant="DICE", M=1)
    TrainConfig(variant="CEB", M=1)
    with pytest.raises(ValueError):
        TrainConfig(cr_sampling="exact")
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_dict_roundtrip_and_unknown_keys():
    cfg = TrainConfig(variant="CEBR", cr=CrConfig(tau=None, num_s=2), hidden=(8,), delta=-0.1)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"delta_cr": 0.2})
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"cr": {"taus": 1.0}})
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"lr": {"anchors": [[0, 0.1]], "kind": "x"}})


def test_presets():
    assert set(PRESETS) == {"desk", "cifar"}
    p = preset("cifar")
    assert p.cr.tau == 10.0 and p.cr.num_s == 4 and p.cr.nstep_d == 4
    assert p.delta_ramp == (0.0, 80.0) and p.cov_ramp == (100.0, 250.0)
    assert [v for _, v in p.log_beta.anchors] == [100.0, 10.0, 2.0, 1.5, 1.0]
    d = preset("desk", epochs=3)
    assert d.epochs == 3 and d.batch_size == 32 and d.d == 16
    with pytest.raises(KeyError):
        preset("huge")
