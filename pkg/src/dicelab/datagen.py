"""Synthetic classification with a label-independent nuisance channel shared across inputs.

Each input is ``[core | nuisance]``. Core coordinates hold a class mean plus
isotropic Gaussian noise; nuisance coordinates all load on one per-input latent
``s ~ N(0, 1)`` with pairwise correlation ``rho_s`` and carry no label information.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm


@dataclass
class SpuriousTaskConfig:
    K: int = 4
    core_dim: int = 8
    nuisance_dim: int = 8
    rho_s: float = 0.9
    separation: float = 1.0  # std of the class-mean draws
    core_noise: float = 1.0
    nuisance_scale: float = 1.0
    label_noise: float = 0.0
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.core_dim < 1 or self.nuisance_dim < 0:
            raise ValueError("K and core_dim must be >= 1, nuisance_dim >= 0")
        if not 0.0 <= self.rho_s <= 1.0:
            raise ValueError("rho_s must lie in [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("sample counts must be positive")


@dataclass
class GenerativeRecord:
    class_means: np.ndarray  # (K, core_dim)
    core_noise: float
    nuisance_mask: np.ndarray  # (input_dim,) bool
    rho_s: float
    nuisance_scale: float
    label_noise: float
    seed: int
    shift: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_means"] = self.class_means.tolist()
        d["nuisance_mask"] = self.nuisance_mask.astype(int).tolist()
        return d


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    K: int
    record: GenerativeRecord | None = None
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(self.y.size)

    def __len__(self) -> int:
        return int(self.y.size)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.K, self.record, self.ids[idx])


def _draw(cfg: SpuriousTaskConfig, means: np.ndarray, n: int, rng: np.random.Generator, shift_vec=None):
    y = rng.integers(0, cfg.K, size=n)
    centers = means if shift_vec is None else means + shift_vec
    core = centers[y] + cfg.core_noise * rng.standard_normal((n, cfg.core_dim))
    s = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, cfg.nuisance_dim))
    nuis = cfg.nuisance_scale * (np.sqrt(cfg.rho_s) * s + np.sqrt(1.0 - cfg.rho_s) * own)
    if cfg.label_noise > 0 and cfg.K > 1:
        flip = rng.random(n) < cfg.label_noise
        other = (y + rng.integers(1, cfg.K, size=n)) % cfg.K
        y = np.where(flip, other, y)
    return np.hstack([core, nuis]), y


def _record(cfg: SpuriousTaskConfig, means: np.ndarray, shift: float = 0.0) -> GenerativeRecord:
    mask = np.r_[np.zeros(cfg.core_dim, bool), np.ones(cfg.nuisance_dim, bool)]
    return GenerativeRecord(means, cfg.core_noise, mask, cfg.rho_s, cfg.nuisance_scale, cfg.label_noise, cfg.seed, shift)


def _means(cfg: SpuriousTaskConfig) -> np.ndarray:
    return cfg.separation * np.random.default_rng([cfg.seed, 0]).standard_normal((cfg.K, cfg.core_dim))


def make_spurious_clusters(cfg: SpuriousTaskConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets sharing one generative record."""
    means = _means(cfg)
    rec = _record(cfg, means)
    xtr, ytr = _draw(cfg, means, cfg.n_train, np.random.default_rng([cfg.seed, 1]))
    xte, yte = _draw(cfg, means, cfg.n_test, np.random.default_rng([cfg.seed, 2]))
    return Dataset(xtr, ytr, cfg.K, rec), Dataset(xte, yte, cfg.K, rec)


def make_ood_shift(cfg: SpuriousTaskConfig, shift: float, n: int | None = None) -> Dataset:
    """Inputs whose class means are translated by ``shift`` along a fixed random unit
    direction (scaled by the mean separation) and spread by ``1 + shift``. Labels are
    kept only for bookkeeping."""
    means = _means(cfg)
    direction = np.random.default_rng([cfg.seed, 3]).standard_normal(cfg.core_dim)
    direction /= np.linalg.norm(direction)
    shift_vec = shift * max(cfg.separation, 1e-12) * np.sqrt(cfg.core_dim) * direction
    shifted = SpuriousTaskConfig(**{**asdict(cfg), "core_noise": cfg.core_noise * (1.0 + abs(shift))})
    x, y = _draw(shifted, means, n or cfg.n_test, np.random.default_rng([cfg.seed, 4]), shift_vec)
    return Dataset(x, y, cfg.K, _record(shifted, means + shift_vec, shift))


def split_train_val(ds: Dataset, frac: float = 0.95, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split; ``frac`` of the rows go to the first part."""
    if not 0.0 <= frac <= 1.0:
        raise ValueError("frac must lie in [0, 1]")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(frac * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def bayes_accuracy(record: GenerativeRecord, grid: int = 801, span: float = 6.0) -> float:
    """Bayes-optimal accuracy for a 2-D core with equal class priors, by grid integration.

    The nuisance block is label-independent and drops out. Symmetric label noise
    ``eta`` maps accuracy ``a`` to ``(1 - eta) a + eta (1 - a) / (K - 1)``.
    """
    means = np.asarray(record.class_means)
    if means.shape[1] != 2:
        raise ValueError("numeric integration implemented for 2-D cores")
    s = record.core_noise
    lo = means.min(axis=0) - span * s
    hi = means.max(axis=0) + span * s
    g0 = np.linspace(lo[0], hi[0], grid)
    g1 = np.linspace(lo[1], hi[1], grid)
    p0 = norm.pdf(g0[None, :], means[:, :1], s)  # (K, grid)
    p1 = norm.pdf(g1[None, :], means[:, 1:], s)
    dens = p0[:, :, None] * p1[:, None, :] / means.shape[0]  # (K, grid, grid)
    best = dens.max(axis=0)
    acc = float(trapezoid(trapezoid(best, g1, axis=1), g0))
    K, eta = means.shape[0], record.label_noise
    if eta > 0 and K > 1:
        acc = (1 - eta) * acc + eta * (1 - acc) / (K - 1)
    return acc


def plugin_mutual_information(a: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Histogram plug-in estimate of I(a; label) in nats, ``a`` discretized into quantile bins."""
    edges = np.quantile(a, np.linspace(0, 1, bins + 1)[1:-1])
    ab = np.searchsorted(edges, a)
    joint = np.zeros((bins, int(labels.max()) + 1))
    np.add.at(joint, (ab, labels), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ py)[nz])).sum())
