"""Ensemble members (Gaussian encoder, backward embeddings, classifier) and the shared discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet

SCALE_BIAS_INIT = math.log(math.e - 1.0)  # softplus^-1(1): encoders start near unit scale

STRUCTURES = ("independent", "shared-trunk")
SCALE_MODES = ("none", "unit", "predicted", "ramped")


@dataclass
class Architecture:
    input_dim: int
    d: int = 16
    K: int = 4
    M: int = 2
    hidden: tuple[int, ...] = (64, 64)
    structure: str = "independent"
    # "class" -> K x d backward table, "marginal" -> one shared row, None -> deterministic member
    backward: str | None = "class"
    discriminator: str | None = None  # "conditional", "unconditional" or None
    disc_hidden: tuple[int, ...] = (256, 256, 100)
    disc_embed: int = 64
    disc_slope: float = 0.2
    combine: str = "prob"  # "prob" averages softmax outputs, "logit" averages logits

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if self.structure == "shared-trunk" and len(self.hidden) < 2:
            raise ValueError("shared-trunk needs at least two hidden layers")
        if self.backward not in ("class", "marginal", None):
            raise ValueError("backward must be 'class', 'marginal' or None")
        if self.discriminator not in ("conditional", "unconditional", None):
            raise ValueError("discriminator must be 'conditional', 'unconditional' or None")
        if self.combine not in ("prob", "logit"):
            raise ValueError("combine must be 'prob' or 'logit'")


@dataclass
class GaussianFeatures:
    """Diagonal Gaussian over features: ``mean`` and strictly positive ``scale``, shape (n, d)."""

    mean: Tensor
    scale: Tensor

    def detach(self) -> "GaussianFeatures":
        return GaussianFeatures(self.mean.detach(), self.scale.detach())


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_dense(ps: ParamSet, rng, name: str, n_in: int, n_out: int) -> None:
    ps.add(f"{name}.W", _fan_in_uniform(rng, n_in, (n_in, n_out)))
    ps.add(f"{name}.b", _fan_in_uniform(rng, n_in, (n_out,)))


def _apply_dense(ps: ParamSet, name: str, x, frozen: bool = False) -> Tensor:
    w, b = ps[f"{name}.W"], ps[f"{name}.b"]
    if frozen:
        w, b = w.detach(), b.detach()
    return ad.dense(x, w, b)


class Member:
    """View of member ``index`` inside an :class:`EnsembleModel`."""

    def __init__(self, model: "EnsembleModel", index: int):
        self.model = model
        self.index = index
        self.prefix = f"m{index}"

    def _layer_names(self) -> list[str]:
        arch = self.model.arch
        names = []
        for li in range(len(arch.hidden)):
            if arch.structure == "shared-trunk" and li == 0:
                names.append("trunk.0")
            else:
                names.append(f"{self.prefix}.enc.{li}")
        return names

    def param_names(self) -> list[str]:
        return [n for n in self.model.members if n.startswith(self.prefix + ".")]

    def encode(self, x) -> GaussianFeatures:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.model.arch.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.model.arch.input_dim}")
        ps = self.model.members
        h = x
        for name in self._layer_names():
            h = ad.relu(_apply_dense(ps, name, h))
        mean = _apply_dense(ps, f"{self.prefix}.mu", h)
        scale = ad.softplus(_apply_dense(ps, f"{self.prefix}.sigma", mean))
        return GaussianFeatures(mean, scale)

    def classify(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[1] != self.model.arch.d:
            raise ValueError(f"feature dim {z.shape[1]} != {self.model.arch.d}")
        return _apply_dense(self.model.members, f"{self.prefix}.cls", z)

    def backward_mean(self, y: np.ndarray) -> Tensor:
        """Per-example target means: class rows for CEB, the shared row for VIB."""
        table = self.model.members[f"{self.prefix}.back"]
        y = np.asarray(y, dtype=np.int64)
        if self.model.arch.backward == "marginal":
            return ad.index(table, np.zeros_like(y))
        return ad.index(table, y)


@dataclass
class EnsembleModel:
    arch: Architecture
    members: ParamSet = field(default_factory=ParamSet)
    disc: ParamSet | None = None

    @classmethod
    def init(cls, arch: Architecture, member_rng: np.random.Generator, disc_rng: np.random.Generator | None = None):
        model = cls(arch)
        ps = model.members
        dims = (arch.input_dim,) + arch.hidden
        if arch.structure == "shared-trunk":
            _add_dense(ps, member_rng, "trunk.0", dims[0], dims[1])
        for i in range(arch.M):
            p = f"m{i}"
            for li in range(len(arch.hidden)):
                if arch.structure == "shared-trunk" and li == 0:
                    continue
                _add_dense(ps, member_rng, f"{p}.enc.{li}", dims[li], dims[li + 1])
            _add_dense(ps, member_rng, f"{p}.mu", dims[-1], arch.d)
            _add_dense(ps, member_rng, f"{p}.sigma", arch.d, arch.d)
            ps[f"{p}.sigma.b"].data = ps[f"{p}.sigma.b"].data + SCALE_BIAS_INIT
            _add_dense(ps, member_rng, f"{p}.cls", arch.d, arch.K)
            if arch.backward == "class":
                ps.add(f"{p}.back", member_rng.standard_normal((arch.K, arch.d)))
            elif arch.backward == "marginal":
                ps.add(f"{p}.back", member_rng.standard_normal((1, arch.d)))
        if arch.discriminator is not None:
            if disc_rng is None:
                raise ValueError("a discriminator needs its own generator")
            model.disc = init_discriminator(arch, disc_rng)
        return model

    @property
    def M(self) -> int:
        return self.arch.M

    def member(self, i: int) -> Member:
        if not 0 <= i < self.arch.M:
            raise IndexError(f"member {i} out of range")
        return Member(self, i)

    def member_list(self) -> list[Member]:
        return [Member(self, i) for i in range(self.arch.M)]


# -- discriminator -------------------------------------------------------------


def init_discriminator(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    ps = ParamSet()
    conditional = arch.discriminator == "conditional"
    e = arch.disc_embed if conditional else 0
    h = arch.disc_hidden
    if conditional:
        ps.add("disc.embed", rng.standard_normal((arch.K, e)))
    _add_dense(ps, rng, "disc.0", arch.M * arch.d + e, h[0])
    for li in range(1, len(h)):
        extra = e if li == 1 else 0
        _add_dense(ps, rng, f"disc.{li}", h[li - 1] + extra, h[li])
    _add_dense(ps, rng, "disc.out", h[-1], arch.K if conditional else 1)
    return ps


def discriminator_logits(
    model: EnsembleModel,
    za,
    zb,
    slot_a,
    slot_b,
    y,
    frozen: bool = False,
) -> Tensor:
    """Pre-sigmoid discriminator score for each row of a pair batch, shape (n,).

    ``za`` fills member slot ``slot_a`` and ``zb`` fills ``slot_b``; the other slots
    are zero. The conditional variant embeds ``y`` at the first two layers and reads
    output unit ``y``. With ``frozen`` the discriminator weights are constants.
    """
    arch = model.arch
    ps = model.disc
    if ps is None:
        raise ValueError("model has no discriminator")
    za, zb = ad.as_tensor(za), ad.as_tensor(zb)
    n = za.shape[0]
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    slot_a = np.broadcast_to(np.asarray(slot_a, dtype=np.int64), (n,))
    slot_b = np.broadcast_to(np.asarray(slot_b, dtype=np.int64), (n,))
    conditional = arch.discriminator == "conditional"
    if conditional and (y.size != n or y.min(initial=0) < 0 or y.max(initial=0) >= arch.K):
        raise IndexError("class index out of range")
    x = ad.place_slots(za, zb, slot_a, slot_b, arch.M)
    if conditional:
        table = ps["disc.embed"].detach() if frozen else ps["disc.embed"]
        emb = ad.index(table, y)
        x = ad.concat([x, emb], axis=1)
    h = x
    for li in range(len(arch.disc_hidden)):
        if li == 1 and conditional:
            h = ad.concat([h, emb], axis=1)
        h = ad.leaky_relu(_apply_dense(ps, f"disc.{li}", h, frozen), arch.disc_slope)
    out = _apply_dense(ps, "disc.out", h, frozen)
    if conditional:
        return ad.index(out, (np.arange(n), y))
    return ad.reshape(out, (n,))


def discriminate(model: EnsembleModel, z_i, z_j, y: int, slot_i: int = 0, slot_j: int = 1) -> float:
    """Probability that the pair (z_i, z_j) given class ``y`` is a joint draw."""
    logit = discriminator_logits(
        model, np.reshape(z_i, (1, -1)), np.reshape(z_j, (1, -1)), [slot_i], [slot_j], [y]
    )
    return float(ad.sigmoid(logit).data[0])


# -- sampling and prediction -----------------------------------------------------


def ramp_fraction(step: float, start: float, end: float) -> float:
    """0 before ``start``, 1 after ``end``, linear in between."""
    if step <= start:
        return 0.0
    if step >= end:
        return 1.0
    return (step - start) / (end - start)


def sample_features(
    g: GaussianFeatures,
    noise,
    scale_mode: str = "predicted",
    ramp: float = 1.0,
) -> Tensor:
    """Reparameterized draw ``mean + noise * s`` where ``s`` depends on ``scale_mode``.

    ``ramped`` uses ``(1 - ramp) * 1 + ramp * scale``; ``ramp`` is the covariance-ramp
    fraction from :func:`ramp_fraction`.
    """
    if scale_mode == "none":
        return g.mean
    noise = np.asarray(noise, dtype=np.float64)
    if scale_mode == "unit":
        return g.mean + noise
    if scale_mode == "predicted":
        return g.mean + noise * g.scale
    if scale_mode == "ramped":
        if ramp <= 0.0:
            return g.mean + noise
        return g.mean + noise * ((1.0 - ramp) + ramp * g.scale)
    raise ValueError(f"unknown scale_mode {scale_mode!r}")


def member_logits(model: EnsembleModel, x) -> np.ndarray:
    """Mean-feature logits of every member, shape (M, n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.stack([m.classify(m.encode(x).mean).data for m in model.member_list()])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def combine_logits(logits: np.ndarray, combine: str = "prob") -> np.ndarray:
    """Ensemble log-scores whose softmax is the ensemble prediction.

    ``prob``: log of the averaged member probabilities; ``logit``: averaged logits.
    """
    if combine == "logit":
        return logits.mean(axis=0)
    return np.log(np.maximum(softmax(logits).mean(axis=0), 1e-300))


def ensemble_predict(model: EnsembleModel, x) -> np.ndarray:
    """Ensemble class probabilities from mean features, shape (n, K) (or (K,) for one input)."""
    single = np.ndim(x) == 1
    logits = member_logits(model, x)
    if model.arch.combine == "logit":
        out = softmax(logits.mean(axis=0))
    else:
        out = softmax(logits).mean(axis=0)
    return out[0] if single else out
