"""Training configuration, piecewise schedules and named presets."""

from __future__ import annotations

import bisect
import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .redundancy import CrConfig

VARIANTS = ("Ind", "IB", "CEB", "IBR", "CEBR", "DICE")
REDUNDANCY_VARIANTS = ("IBR", "CEBR", "DICE")


@dataclass
class Schedule:
    """Piecewise schedule over epochs: ``step-hold`` or ``linear-ramp`` between anchors."""

    anchors: list[tuple[float, float]]
    mode: str = "step-hold"

    def __post_init__(self):
        self.anchors = [(float(s), float(v)) for s, v in self.anchors]
        if not self.anchors:
            raise ValueError("schedule needs at least one anchor")
        steps = [s for s, _ in self.anchors]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("anchor steps must be strictly increasing")
        if self.mode not in ("step-hold", "linear-ramp"):
            raise ValueError("mode must be 'step-hold' or 'linear-ramp'")

    def __call__(self, step: float) -> float:
        return schedule_value(self, step)


def schedule_value(s: Schedule, step: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if not s.anchors:
        raise ValueError("empty anchors")
    steps = [a for a, _ in s.anchors]
    k = bisect.bisect_right(steps, step) - 1
    if k < 0:
        return s.anchors[0][1]
    if k == len(steps) - 1 or s.mode == "step-hold":
        return s.anchors[k][1]
    (s0, v0), (s1, v1) = s.anchors[k], s.anchors[k + 1]
    return v0 + (v1 - v0) * (step - s0) / (s1 - s0)


def ramp(start: float, end: float, value: float) -> Schedule:
    """0 until ``start``, linear to ``value`` at ``end``, then held."""
    if end <= start:
        return Schedule([(start, value)], "step-hold") if start > 0 else Schedule([(0, value)])
    anchors = [(start, 0.0), (end, value)]
    if start > 0:
        anchors.insert(0, (0.0, 0.0))
    return Schedule(anchors, "linear-ramp")


@dataclass
class TrainConfig:
    variant: str = "DICE"
    M: int = 4
    d: int = 16
    hidden: tuple[int, ...] = (64, 64)
    structure: str = "independent"
    combine: str = "prob"
    # schedule of log(beta_ceb); beta_ib = beta_ceb + 1
    log_beta: Schedule = field(default_factory=lambda: Schedule([(0, 100.0), (1, 10.0), (10, 2.0)]))
    delta: float = 0.2  # delta_cr for DICE, delta_r for IBR / CEBR
    delta_ramp: tuple[float, float] = (0.0, 8.0)
    cov_ramp: tuple[float, float] = (10.0, 25.0)
    cr_sampling: str = "ramped"  # none | unit | predicted | ramped
    cr: CrConfig = field(default_factory=CrConfig)
    bank_capacity: int = 4
    lr: Schedule = field(default_factory=lambda: Schedule([(0, 0.05), (15, 0.005), (23, 0.0005)]))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    disc_lr: float = 0.003
    disc_decay: float = 0.9
    disc_hidden: tuple[int, ...] = (64, 64, 32)
    disc_embed: int = 16
    disc_slope: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        self.delta_ramp = tuple(self.delta_ramp)
        self.cov_ramp = tuple(self.cov_ramp)
        if isinstance(self.log_beta, dict):
            self.log_beta = Schedule(**self.log_beta)
        if isinstance(self.lr, dict):
            self.lr = Schedule(**self.lr)
        if isinstance(self.cr, dict):
            self.cr = CrConfig(**self.cr)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.has_redundancy and self.M < 2:
            raise ValueError(f"{self.variant} needs M >= 2")
        if self.cr_sampling not in ("none", "unit", "predicted", "ramped"):
            raise ValueError("cr_sampling must be none, unit, predicted or ramped")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def has_redundancy(self) -> bool:
        return self.variant in REDUNDANCY_VARIANTS

    @property
    def backward(self) -> str | None:
        return {"Ind": None, "IB": "marginal", "IBR": "marginal"}.get(self.variant, "class")

    @property
    def discriminator(self) -> str | None:
        if self.variant == "DICE":
            return "conditional"
        if self.variant in ("IBR", "CEBR"):
            return "unconditional"
        return None

    def beta(self, epoch: float) -> float:
        b = math.exp(self.log_beta(epoch))
        return b + 1.0 if self.variant in ("IB", "IBR") else b

    def delta_at(self, epoch: float) -> float:
        if not self.has_redundancy:
            return 0.0
        return ramp(self.delta_ramp[0], self.delta_ramp[1], self.delta)(epoch)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        d["delta_ramp"] = list(self.delta_ramp)
        d["cov_ramp"] = list(self.cov_ramp)
        for k in ("log_beta", "lr"):
            d[k]["anchors"] = [list(a) for a in d[k]["anchors"]]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train keys: {sorted(unknown)}")
        d = copy.deepcopy(d)
        if "cr" in d:
            cr_known = {f.name for f in fields(CrConfig)}
            bad = set(d["cr"]) - cr_known
            if bad:
                raise KeyError(f"unknown cr keys: {sorted(bad)}")
        for k in ("log_beta", "lr"):
            if k in d and isinstance(d[k], dict):
                extra = set(d[k]) - {"anchors", "mode"}
                if extra:
                    raise KeyError(f"unknown {k} keys: {sorted(extra)}")
        return cls(**d)


# Values prescribed for CIFAR-scale runs (300 epochs, schedules in epochs).
CIFAR = {
    "M": 4,
    "d": 64,
    "log_beta": {"anchors": [[0, 100.0], [8, 10.0], [175, 2.0], [250, 1.5], [300, 1.0]], "mode": "step-hold"},
    "delta": 0.2,
    "delta_ramp": [0.0, 80.0],
    "cov_ramp": [100.0, 250.0],
    "cr": {"tau": 10.0, "num_s": 4, "neg_per_pos": 4, "nstep_d": 4, "include_rhs": False},
    "lr": {"anchors": [[0, 0.1], [150, 0.001], [225, 0.0001], [250, 0.00001]], "mode": "step-hold"},
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "disc_lr": 0.005,
    "disc_hidden": [256, 256, 100],
    "disc_embed": 64,
    "epochs": 300,
    "batch_size": 128,
}

# Desk scale is the TrainConfig field defaults: 30 epochs, compressed schedules, small discriminator.
DESK: dict[str, Any] = {}

PRESETS = {"desk": DESK, "cifar": CIFAR}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    d.update(overrides)
    return TrainConfig.from_dict(d)
