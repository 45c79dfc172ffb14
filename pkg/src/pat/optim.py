"""Adam with bias correction, plus the step-decay learning-rate schedule."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class ParamSet:
    """Named parameters with their Adam moments and a shared step counter."""

    def __init__(self, params: "OrderedDict[str, Tensor] | dict"):
        self.params = OrderedDict(params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step = 0

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(ps: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    for name, p in ps.params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    ps.step += 1
    c1 = 1.0 - beta1**ps.step
    c2 = 1.0 - beta2**ps.step
    for name, p in ps.params.items():
        g = p.grad
        m = ps.m[name]
        v = ps.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p.grad = None
    return ps


@dataclass(frozen=True)
class StepDecay:
    """lr = initial / factor ** (epoch // period)."""

    initial: float = 1e-4
    factor: float = 10.0
    period: int = 7

    def __call__(self, epoch: int) -> float:
        return self.initial / self.factor ** (epoch // self.period)
