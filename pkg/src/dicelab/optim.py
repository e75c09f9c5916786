"""Named parameter collections and the SGD-Nesterov / RMSProp update rules."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor

RMSPROP_EPS = 1e-8


class ParamSet:
    """Ordered named parameters plus per-parameter optimizer state."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def _check(params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {params[name].shape}")


def sgd_nesterov_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> ParamSet:
    """``v <- mu*v + g + wd*p ; p <- p - lr*(g + wd*p + mu*v)`` for every graded parameter."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    _check(params, grads)
    for name, g in grads.items():
        p = params[name]
        g = g + weight_decay * p.data if weight_decay else g
        v = params.state.get(name)
        v = g.copy() if v is None else momentum * v + g
        params.state[name] = v
        p.data = p.data - lr * (g + momentum * v)
    return params


def rmsprop_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    decay_rate: float = 0.9,
) -> ParamSet:
    """``s <- rho*s + (1-rho)*g^2 ; p <- p - lr*g/sqrt(s + eps)``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 < decay_rate < 1.0:
        raise ValueError("decay_rate must lie in (0, 1)")
    _check(params, grads)
    for name, g in grads.items():
        p = params[name]
        s = params.state.get(name)
        s = (1.0 - decay_rate) * g * g if s is None else decay_rate * s + (1.0 - decay_rate) * g * g
        params.state[name] = s
        p.data = p.data - lr * g / np.sqrt(s + RMSPROP_EPS)
    return params
