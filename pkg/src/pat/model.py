"""The PAT network: fine detection, coarse detection, and the two-head classifier."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import ENCODINGS, RPTBlock, absolute_encoding
from .module import Conv1d, Linear, Module
from .tensor import ShapeError, Tensor

STRUCTURES = ("full", "v1_hierarchical", "v2_from_tokens", "fdm_only", "cdm_only", "tokens_only")
LOSSES = ("asymmetric", "bce")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    clip_len: int = 256
    input_dim: int = 1024
    model_dim: int = 512
    blocks: int = 3
    heads: int = 8
    branches: int = 3
    classes: int = 157
    alpha_fine: float = 0.1
    alpha_coarse: float = 0.9
    encoding: str = "relative"
    structure: str = "full"
    loss: str = "asymmetric"
    gamma_pos: float = 1.0
    gamma_neg: float = 3.0
    delta: float = 0.1
    per_head_tables: bool = False
    dropout: float = 0.0
    init_std: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**overrides).validate()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        # sigma 0.02 suits width 512; at width 32 the position bias q . omega starts too small to learn
        base = dict(clip_len=64, input_dim=16, model_dim=32, blocks=2, heads=4, branches=2, classes=8,
                    alpha_fine=0.5, alpha_coarse=0.5, init_std=0.2)
        base.update(overrides)
        return cls(**base).validate()

    def validate(self) -> "ModelConfig":
        if self.structure not in STRUCTURES:
            raise ConfigError(f"structure: unknown value {self.structure!r}")
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"encoding: unknown value {self.encoding!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: unknown value {self.loss!r}")
        for name in ("clip_len", "input_dim", "model_dim", "heads", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.blocks < 0 or self.branches < 0:
            raise ConfigError("blocks and branches must be nonnegative")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim: {self.model_dim} not divisible by heads={self.heads}")
        if self.clip_len % (2 ** self.branches):
            raise ConfigError(f"clip_len: {self.clip_len} not divisible by 2^{self.branches}")
        if self.alpha_fine < 0 or self.alpha_coarse < 0 or abs(self.alpha_fine + self.alpha_coarse - 1) > 1e-9:
            raise ConfigError(f"alpha: ({self.alpha_fine}, {self.alpha_coarse}) must be nonnegative and sum to 1")
        if self.gamma_pos < 0 or self.gamma_neg < 0 or not 0 <= self.delta < 1:
            raise ConfigError("loss params: need gamma >= 0 and 0 <= delta < 1")
        if self.encoding == "absolute" and self.model_dim % 2:
            raise ConfigError("encoding: absolute needs an even model_dim")
        if self.structure in ("full", "v1_hierarchical", "cdm_only") and self.branches == 0:
            raise ConfigError(f"branches: structure {self.structure!r} needs at least one branch")
        if self.structure == "tokens_only" and self.encoding == "relative":
            raise ConfigError("encoding: tokens_only has no attention to carry a relative table")
        return self

    @property
    def has_fine(self) -> bool:
        return self.structure in ("full", "v1_hierarchical", "v2_from_tokens", "fdm_only", "tokens_only")

    @property
    def has_coarse(self) -> bool:
        return self.structure in ("full", "v1_hierarchical", "v2_from_tokens", "cdm_only") and self.branches > 0

    @property
    def min_len(self) -> int:
        return 2 ** self.branches if self.has_coarse else 1

    def head_weights(self) -> dict:
        if self.has_fine and self.has_coarse:
            return {"fine": self.alpha_fine, "coarse": self.alpha_coarse}
        return {"fine": 1.0} if self.has_fine else {"coarse": 1.0}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Prediction:
    """Per-head probability grids plus the intermediate features used by audits."""

    heads: dict
    fine: Tensor | None = None
    coarse: Tensor | None = None
    branches: list = field(default_factory=list)

    def fused(self, weights: dict) -> np.ndarray:
        return fuse_predictions({k: v.data for k, v in self.heads.items()}, weights)


def fuse_predictions(heads: dict, weights: dict) -> np.ndarray:
    """Convex combination of head probability grids."""
    if set(heads) != set(weights):
        raise ConfigError(f"fusion weights {sorted(weights)} do not match heads {sorted(heads)}")
    w = np.array(list(weights.values()), dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1) > 1e-9:
        raise ConfigError(f"fusion weights {weights} must be nonnegative and sum to 1")
    if len(heads) == 1:
        return np.asarray(next(iter(heads.values()))).copy()
    out = None
    for name, alpha in weights.items():
        term = alpha * np.asarray(heads[name], dtype=np.float64)
        out = term if out is None else out + term
    return out


class RPTStack(Module):
    def __init__(self, cfg: ModelConfig, n_max: int, rng):
        super().__init__()
        self.blocks = [
            self.child(f"block{b}", RPTBlock(cfg.model_dim, cfg.heads, n_max, rng, cfg.encoding,
                                             cfg.per_head_tables, cfg.dropout, cfg.init_std))
            for b in range(cfg.blocks)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def _add_absolute(x: Tensor) -> Tensor:
    return x + absolute_encoding(x.shape[0], x.shape[1]).astype(x.dtype)


class FineDetection(Module):
    """Kernel-3 stride-1 projection to the model dim, then B RPT blocks."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.proj = self.child("proj", Conv1d(cfg.input_dim, cfg.model_dim, 3, rng, std=cfg.init_std))
        self.rpt = self.child("rpt", RPTStack(cfg, cfg.clip_len, rng))

    def __call__(self, tokens: Tensor) -> Tensor:
        x = self.proj(tokens)
        if self.cfg.encoding == "absolute":
            x = _add_absolute(x)
        return self.rpt(x)


class CoarseBranch(Module):
    """One strided kernel-3 conv followed by B RPT blocks at the reduced rate."""

    def __init__(self, cfg: ModelConfig, d_in: int, stride: int, n_max: int, rng, encode_absolute=False):
        super().__init__()
        self.stride = stride
        self.encode_absolute = encode_absolute
        self.down = self.child("down", Conv1d(d_in, cfg.model_dim, 3, rng, stride=stride, std=cfg.init_std))
        self.rpt = self.child("rpt", RPTStack(cfg, max(1, n_max), rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.down(x)
        if self.encode_absolute:
            x = _add_absolute(x)
        return self.rpt(x)


class CoarseDetection(Module):
    """F branches, upsampled to full length and summed.

    ``mode`` selects the wiring: "parallel" (each branch strides the fine
    features once by 2^i), "hierarchical" (branch i strides branch i-1's
    output by 2), or "tokens" (each branch strides the raw tokens by 2^i).
    """

    def __init__(self, cfg: ModelConfig, mode: str, rng):
        super().__init__()
        self.mode = mode
        from_tokens = mode == "tokens"
        self.branches = []
        for i in range(1, cfg.branches + 1):
            stride = 2 if mode == "hierarchical" else 2 ** i
            d_in = cfg.input_dim if from_tokens else cfg.model_dim
            encode = from_tokens and cfg.encoding == "absolute"
            self.branches.append(
                self.child(f"branch{i}", CoarseBranch(cfg, d_in, stride, cfg.clip_len // 2 ** i, rng, encode)))

    def forward_branches(self, source: Tensor) -> list:
        outs, x = [], source
        for branch in self.branches:
            x = branch(x if self.mode == "hierarchical" else source)
            outs.append(x)
        return outs

    def __call__(self, source: Tensor, length: int):
        outs = self.forward_branches(source)
        fused = None
        for o in outs:
            up = tn.resample_linear(o, length)
            fused = up if fused is None else fused + up
        return fused, outs


class ClassHead(Module):
    """Two kernel-1 convs with GELU between, then sigmoid."""

    def __init__(self, d_in: int, classes: int, rng, std=0.02):
        super().__init__()
        self.hidden = self.child("hidden", Conv1d(d_in, d_in, 1, rng, std=std))
        self.out = self.child("out", Conv1d(d_in, classes, 1, rng, std=std))

    def logits(self, x: Tensor) -> Tensor:
        return self.out(tn.gelu(self.hidden(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.sigmoid(self.logits(x))


class PAT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(0) if rng is None else rng
        s = cfg.structure
        self.fdm = self.cdm = self.token_proj = None
        if s in ("full", "v1_hierarchical", "v2_from_tokens", "fdm_only"):
            self.fdm = self.child("fdm", FineDetection(cfg, rng))
        if s == "tokens_only":
            self.token_proj = self.child("token_proj", Linear(cfg.input_dim, cfg.model_dim, rng, cfg.init_std))
        if cfg.has_coarse:
            mode = {"full": "parallel", "v1_hierarchical": "hierarchical"}.get(s, "tokens")
            self.cdm = self.child("cdm", CoarseDetection(cfg, mode, rng))
        self.heads = {}
        if cfg.has_fine:
            self.heads["fine"] = self.child("clasm_fine", ClassHead(cfg.model_dim, cfg.classes, rng, cfg.init_std))
        if cfg.has_coarse:
            self.heads["coarse"] = self.child("clasm_coarse", ClassHead(cfg.model_dim, cfg.classes, rng, cfg.init_std))

    def __call__(self, tokens) -> Prediction:
        tokens = tn.as_tensor(tokens)
        cfg = self.cfg
        if tokens.ndim != 2 or tokens.shape[1] != cfg.input_dim:
            raise ShapeError(f"PAT: tokens {tokens.shape}, expected (T, {cfg.input_dim})")
        length = tokens.shape[0]
        if length < cfg.min_len:
            raise ConfigError(f"clip length {length} shorter than 2^branches = {cfg.min_len}")
        fine = coarse = None
        branches = []
        if self.fdm is not None:
            fine = self.fdm(tokens)
        elif self.token_proj is not None:
            fine = self.token_proj(tokens)
            if cfg.encoding == "absolute":
                fine = _add_absolute(fine)
        if self.cdm is not None:
            source = fine if self.cdm.mode in ("parallel", "hierarchical") else tokens
            coarse, branches = self.cdm(source, length)
        heads = {}
        if "fine" in self.heads:
            heads["fine"] = self.heads["fine"](fine)
        if "coarse" in self.heads:
            heads["coarse"] = self.heads["coarse"](coarse)
        return Prediction(heads=heads, fine=fine, coarse=coarse, branches=branches)

    def predict(self, tokens: np.ndarray, weights: dict | None = None) -> np.ndarray:
        """Fused probabilities for one full sequence, without building a gradient graph."""
        was_training = self.training
        self.eval()
        try:
            with tn.no_grad():
                pred = self(np.asarray(tokens, dtype=self.dtype))
        finally:
            self.train(was_training)
        return pred.fused(weights or self.cfg.head_weights())

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).dtype


def build_variant(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> PAT:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return PAT(cfg.validate(), rng)


def strided_depth(t: Tensor) -> int:
    """Largest number of strided convolutions on any path from the inputs to ``t``."""
    memo: dict = {}
    order = tn._topo_order(t)
    for node in order:
        own = 1 if node.op == "conv1d" and node.meta and node.meta["stride"] > 1 else 0
        memo[id(node)] = own + max((memo[id(p)] for p in node.parents), default=0)
    return memo[id(t)]


def infer_dims(state: dict) -> dict:
    """Recover architecture fields from checkpoint tensor shapes where possible."""
    dims = {}
    for name, arr in state.items():
        if name == "fdm.proj.weight":
            dims["input_dim"], dims["model_dim"] = int(arr.shape[1]), int(arr.shape[2])
        elif name.endswith(".out.weight") and name.startswith("clasm"):
            dims["classes"] = int(arr.shape[2])
    blocks = {n.split(".")[2] for n in state if n.startswith("fdm.rpt.block")}
    if blocks:
        dims["blocks"] = len(blocks)
    branches = {n.split(".")[1] for n in state if n.startswith("cdm.branch")}
    dims["branches"] = len(branches)
    tables = [a for n, a in state.items() if n.endswith("relpos.weight")]
    if tables and "model_dim" in dims:
        dims["heads"] = dims["model_dim"] // int(tables[0].shape[1])
    table = state.get("fdm.rpt.block0.attn.relpos.weight")
    if table is not None and dims.get("heads") and table.shape[0] % 2 == 1:
        dims["clip_len"] = (int(table.shape[0]) + 1) // 2
    return dims
