"""Self-checks of the core numerics against independent reference implementations.

Each suite returns a SuiteResult; ``run_all`` collects them. A fault mode can
be injected to confirm that the suites actually detect a corrupted kernel.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import RelPosTable, inject_fault, relpos_bias
from .gradcheck import grad_check
from .loss import LossParams, asymmetric_loss, total_loss
from .metrics import EvalBatch, per_frame_map
from .model import ModelConfig, build_variant, strided_depth
from .oracles import map_brute, relpos_bias_naive
from .tensor import Tensor

FAULTS = ("bias-sign",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<10} max_error={self.max_error:.3g} time={self.seconds:.2f}s {self.detail}".rstrip()


def _table(n_max, dh, rng):
    with tn.precision(np.float64):
        return RelPosTable(n_max, dh, rng, std=1.0)


def check_skew(trials: int = 100, n_range=range(1, 17), dims=(1, 2, 8), seed: int = 0, tol: float = 1e-5):
    """Skewed bias against the naive double loop, over sizes and head widths."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for dh in dims:
        table = _table(max(n_range), dh, rng)
        for n in n_range:
            for _ in range(trials):
                q = rng.normal(size=(n, dh))
                fast = relpos_bias(Tensor(q), table).data
                worst = max(worst, float(np.abs(fast - relpos_bias_naive(q, table.weight.data, max(n_range))).max()))
    return worst <= tol, worst, f"{trials * len(n_range) * len(dims)} cases"


def check_offsets(instances: int = 100, seed: int = 1):
    """Duplicated queries must see bitwise-identical bias at equal offsets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 17))
        dh = int(rng.choice([1, 2, 8]))
        table = _table(n, dh, rng)
        q = rng.normal(size=(n, dh))
        a, b = sorted(rng.choice(n, size=2, replace=False))
        q[b] = q[a]
        p = relpos_bias(Tensor(q), table).data
        ks = np.arange(-a, n - b)
        worst = max(worst, float(np.abs(p[a, a + ks] - p[b, b + ks]).max()))
    return worst == 0.0, worst, f"{instances} instances, bitwise"


def tiny_config(**kw) -> ModelConfig:
    base = dict(clip_len=8, input_dim=6, model_dim=4, blocks=1, heads=2, branches=2, classes=3,
                alpha_fine=0.5, alpha_coarse=0.5)
    base.update(kw)
    return ModelConfig(**base).validate()


def check_gradients(seed: int = 0, h: float = 1e-3):
    """Finite-difference check of total_loss for the tiny full model in float64."""
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    with tn.precision(np.float64):
        model = build_variant(cfg, seed=seed)
        for p in model.parameters().values():
            p.data[:] = rng.normal(scale=0.5, size=p.shape)
        tokens = Tensor(rng.normal(size=(cfg.clip_len, cfg.input_dim)))
        labels = rng.integers(0, 2, size=(cfg.clip_len, cfg.classes))
        params = LossParams.from_config(cfg)

        def loss():
            return total_loss(labels, model(tokens).heads, cfg.head_weights(), params)

        report = grad_check(loss, model.parameters(), h=h)
    frac = report.fraction_within(1e-3)
    ok = frac >= 0.95 and report.max_error <= 1e-2
    return ok, report.max_error, f"{frac:.1%} of {report.n_coords} coords within 1e-3"


def check_loss():
    """Hand-computed loss values and the easy-negative discard."""
    with tn.precision(np.float64):
        pos = asymmetric_loss(np.array([[1]]), Tensor(np.array([[0.5]])), LossParams(gamma_pos=1)).item()
        neg = asymmetric_loss(np.array([[0]]), Tensor(np.array([[0.6]])), LossParams(gamma_neg=3, delta=0.1)).item()
        y = Tensor(np.linspace(0, 0.1, 11)[None, :], requires_grad=True)
        easy = tn.sum(asymmetric_loss(np.zeros((1, 11), dtype=np.int64), y, LossParams(delta=0.1)))
        easy.backward()
    err = max(abs(pos - 0.346574), abs(neg - 0.086643))
    ok = err <= 1e-6 and easy.item() == 0.0 and not y.grad.any()
    return ok, err, "hand values and easy negatives"


def check_map(cases: int = 1000, seed: int = 2):
    """Per-frame mAP against the brute-force pairwise-rank oracle on small grids."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        T = int(rng.integers(1, 9))
        C = int(rng.integers(1, 4))
        labels = rng.integers(0, 2, size=(T, C))
        if not labels.any():
            labels[rng.integers(T), rng.integers(C)] = 1
        scores = rng.random((T, C))
        if case % 4 == 0:
            scores = np.round(scores, 1)
        got = per_frame_map(EvalBatch(scores, labels)).map
        worst = max(worst, abs(got - map_brute(scores, labels)))
    return worst <= 1e-12, worst, f"{cases} cases"


def check_shapes():
    """Branch lengths, fused size and strided depth at the published scale."""
    cfg = ModelConfig.paper(blocks=1)
    model = build_variant(cfg)
    pred = model(np.zeros((cfg.clip_len, cfg.input_dim), dtype=np.float32))
    lengths = [b.shape[0] for b in pred.branches]
    depths = [strided_depth(b) for b in pred.branches]
    ok = lengths == [128, 64, 32] and pred.coarse.shape == (256, 512) and depths == [1, 1, 1]
    return ok, 0.0, f"branches {lengths} fused {pred.coarse.shape} strided depth {depths}"


SUITES = {
    "skew": check_skew,
    "offsets": check_offsets,
    "gradients": check_gradients,
    "loss": check_loss,
    "map": check_map,
    "shapes": check_shapes,
}


def run_all(fault: str | None = None, suites=None) -> list:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault mode {fault!r}; choose from {FAULTS}")
    results = []
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for name in suites or SUITES:
            start = time.perf_counter()
            ok, err, detail = SUITES[name]()
            results.append(SuiteResult(name, bool(ok), float(err), time.perf_counter() - start, detail))
    return results
