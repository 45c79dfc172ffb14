"""Asymmetric focal loss and the BCE baseline for dense multi-label grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

EPS = 1e-7


@dataclass(frozen=True)
class LossParams:
    gamma_pos: float = 1.0
    gamma_neg: float = 3.0
    delta: float = 0.1
    mode: str = "asymmetric"

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be nonnegative")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if self.mode not in ("asymmetric", "bce"):
            raise ValueError(f"unknown loss mode {self.mode!r}")

    @classmethod
    def from_config(cls, cfg) -> "LossParams":
        return cls(cfg.gamma_pos, cfg.gamma_neg, cfg.delta, cfg.loss)


def _labels(g, like: Tensor) -> np.ndarray:
    g = np.asarray(g)
    if g.shape != like.shape:
        raise ShapeError(f"loss: labels {g.shape} vs predictions {like.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ValueError("loss: labels must be 0 or 1")
    return g.astype(like.dtype)


def asymmetric_loss(g, y: Tensor, params: LossParams = LossParams()) -> Tensor:
    """Elementwise loss -g (1-y)^g+ log y - (1-g) s^g- log(1-s), with s = max(y - delta, 0)."""
    y = tn.as_tensor(y)
    g = _labels(g, y)
    yc = tn.clip(y, EPS, 1 - EPS)
    pos = tn.power(1.0 - yc, params.gamma_pos) * tn.log(yc)
    shifted = tn.relu(yc - params.delta) if params.delta > 0 else yc
    neg = tn.power(shifted, params.gamma_neg) * tn.log(1.0 - shifted)
    return -(pos * g) - (neg * (1.0 - g))


def bce_loss(g, y: Tensor) -> Tensor:
    y = tn.as_tensor(y)
    g = _labels(g, y)
    yc = tn.clip(y, EPS, 1 - EPS)
    return -(tn.log(yc) * g) - (tn.log(1.0 - yc) * (1.0 - g))


def elementwise_loss(g, y: Tensor, params: LossParams) -> Tensor:
    return bce_loss(g, y) if params.mode == "bce" else asymmetric_loss(g, y, params)


def total_loss(labels, heads: dict, weights: dict, params: LossParams = LossParams()) -> Tensor:
    """(1/T) sum over heads, frames and classes of alpha_head * loss."""
    total = None
    for name, alpha in weights.items():
        y = heads[name]
        term = tn.sum(elementwise_loss(labels, y, params)) * (alpha / y.shape[0])
        total = term if total is None else total + term
    return total
