"""Parameter containers shared by the network layers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=tn.default_dtype()), requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def modules(self):
        yield self
        for c in self._children.values():
            yield from c.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast every parameter in place (used to switch to 64-bit for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters())

    def load_state_dict(self, state):
        own = self.parameters()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise tn.ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.asarray(state[k], dtype=p.dtype).copy()


def normal_init(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, std=0.02, bias=True):
        super().__init__()
        self.weight = self.param("weight", normal_init(rng, (d_in, d_out), std))
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, stride=1, padding=None, std=0.02):
        super().__init__()
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        self.weight = self.param("weight", normal_init(rng, (kernel, c_in, c_out), std))
        self.bias = self.param("bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias, self.eps)
