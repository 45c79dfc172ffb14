"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> flat array of relative errors
    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)

    def all_errors(self) -> np.ndarray:
        if not self.errors:
            return np.zeros(0)
        return np.concatenate([e.ravel() for e in self.errors.values()])

    def fraction_within(self, tol: float) -> float:
        e = self.all_errors()
        return float((e <= tol).mean()) if e.size else 1.0

    @property
    def max_error(self) -> float:
        e = self.all_errors()
        return float(e.max()) if e.size else 0.0

    @property
    def n_coords(self) -> int:
        return int(self.all_errors().size)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(model_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-3) -> GradCheckReport:
    """Compare backprop gradients of ``model_fn()`` with central differences.

    All parameters must be float64. ``model_fn`` is re-evaluated with each
    coordinate perturbed by +-h in place.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise GradCheckError(f"{name}: gradient checks require float64, got {p.dtype}")
        p.grad = None
    loss = model_fn()
    if loss.data.size != 1:
        raise GradCheckError(f"model_fn must return a scalar, got shape {loss.shape}")
    loss.backward()

    report = GradCheckReport()
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                with no_grad():
                    flat[i] = orig + h
                    up = float(model_fn().data.reshape(()))
                    flat[i] = orig - h
                    down = float(model_fn().data.reshape(()))
            except NonFiniteError as exc:
                raise GradCheckError(f"non-finite loss perturbing {name}[{i}]: {exc}") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss perturbing {name}[{i}]")
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        report.analytic[name] = analytic
        report.numeric[name] = numeric
        report.errors[name] = relative_error(analytic, numeric)
        p.grad = None
    return report
