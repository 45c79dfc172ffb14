"""Relative positional transformer (RPT) block.

Multi-head self-attention whose logits carry a learned, query-dependent bias
indexed by token offset, followed by a local relational sublayer
(linear -> temporal conv -> linear). Both sublayers are pre-normalized.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import tensor as tn
from .module import Conv1d, LayerNorm, Linear, Module, normal_init
from .tensor import NonFiniteError, ShapeError, Tensor

ENCODINGS = ("relative", "absolute", "none")

_faults: set = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Deliberately corrupt a computation; used to check that the verifier catches it."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


def relative_index(n: int, n_max: int) -> np.ndarray:
    """Table rows for key offsets m - n = -(n-1) .. n-1, clipped to the table range."""
    dist = (n - 1) - np.arange(2 * n - 1)  # query minus key
    return np.clip(dist, -(n_max - 1), n_max - 1) + (n_max - 1)


class RelPosTable(Module):
    """Learned embeddings for relative distances -(N_max-1) .. N_max-1.

    One table per layer shared by all heads, or one per head when
    ``per_head`` is set (rows stacked head-major).
    """

    def __init__(self, n_max: int, head_dim: int, rng, heads: int = 1, per_head=False, std=0.02):
        super().__init__()
        self.n_max = n_max
        self.rows = 2 * n_max - 1
        self.heads = heads if per_head else 1
        self.per_head = per_head
        self.weight = self.param("weight", normal_init(rng, (self.heads * self.rows, head_dim), std))

    def embeddings(self, n: int) -> Tensor:
        idx = relative_index(n, self.n_max)
        if self.per_head:
            idx = idx[None, :] + self.rows * np.arange(self.heads)[:, None]
        return tn.take_rows(self.weight, idx)


def relpos_bias(q: Tensor, table: RelPosTable) -> Tensor:
    """Bias P[n, m] = <q[n], omega(n - m)> for q of shape (N, Dh) or (H, N, Dh).

    Scores against the 2N-1 distinct offsets are formed once and skewed into
    place, so memory stays O(N^2 + N*Dh).
    """
    if q.ndim not in (2, 3) or q.shape[-1] != table.weight.shape[1]:
        raise ShapeError(f"relpos_bias: queries {q.shape} vs table {table.weight.shape}")
    n = q.shape[-2]
    emb = table.embeddings(n)
    if emb.ndim == 3 and q.ndim != 3:
        raise ShapeError("relpos_bias: per-head table needs (H, N, Dh) queries")
    emb_t = tn.transpose(emb, (0, 2, 1) if emb.ndim == 3 else None)
    scores = tn.matmul(q, emb_t)
    bias = tn.rel_skew(scores)
    if "bias-sign" in _faults:
        bias = -bias
    return bias


class MultiHeadRelAttention(Module):
    def __init__(self, dim: int, heads: int, n_max: int, rng, encoding="relative", per_head_tables=False,
                 std=0.02):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.w_q = self.param("w_q", normal_init(rng, (dim, dim), std))
        self.w_k = self.param("w_k", normal_init(rng, (dim, dim), std))
        self.w_v = self.param("w_v", normal_init(rng, (dim, dim), std))
        self.w_o = self.param("w_o", normal_init(rng, (dim, dim), std))
        self.table = None
        if encoding == "relative":
            self.table = self.child("relpos", RelPosTable(n_max, self.head_dim, rng, heads, per_head_tables, std))

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return tn.transpose(tn.reshape(x, (n, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, x: Tensor, residual: Tensor | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"attention: input {x.shape}, expected (N, {self.dim})")
        n = x.shape[0]
        q = self._split(x @ self.w_q)
        k = self._split(x @ self.w_k)
        v = self._split(x @ self.w_v)
        logits = q @ tn.transpose(k, (0, 2, 1))
        if self.table is not None:
            logits = logits + relpos_bias(q, self.table)
        logits = logits * (1.0 / math.sqrt(self.head_dim))
        bad = ~np.isfinite(logits.data).reshape(self.heads, -1).all(axis=1)
        if bad.any():
            raise NonFiniteError(f"attention logits non-finite in head {int(np.argmax(bad))}")
        weights = tn.softmax(logits)
        heads = weights @ v
        merged = tn.reshape(tn.transpose(heads, (1, 0, 2)), (n, self.dim))
        return merged @ self.w_o + (x if residual is None else residual)


class LocalRelational(Module):
    """linear -> GELU -> temporal conv (k=3) -> GELU -> linear, plus residual."""

    def __init__(self, dim: int, rng, std=0.02):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(dim, dim, rng, std))
        self.conv = self.child("conv", Conv1d(dim, dim, 3, rng, std=std))
        self.fc2 = self.child("fc2", Linear(dim, dim, rng, std))

    def __call__(self, x: Tensor, residual: Tensor | None = None) -> Tensor:
        h = tn.gelu(self.fc1(x))
        h = tn.gelu(self.conv(h))
        return self.fc2(h) + (x if residual is None else residual)


class RPTBlock(Module):
    def __init__(self, dim: int, heads: int, n_max: int, rng, encoding="relative", per_head_tables=False,
                 dropout=0.0, std=0.02):
        super().__init__()
        self.dropout = dropout
        self.rng = rng
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadRelAttention(dim, heads, n_max, rng, encoding, per_head_tables, std))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.local = self.child("local", LocalRelational(dim, rng, std))

    def _drop(self, delta: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            return tn.dropout(delta, self.dropout, self.rng)
        return delta

    def __call__(self, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            h = x + self._drop(self.attn(self.norm1(x), residual=tn.as_tensor(np.zeros_like(x.data))))
            return h + self._drop(self.local(self.norm2(h), residual=tn.as_tensor(np.zeros_like(h.data))))
        h = self.attn(self.norm1(x), residual=x)
        return self.local(self.norm2(h), residual=h)


def absolute_encoding(n: int, dim: int) -> np.ndarray:
    """Sinusoidal table: channel 2i holds sin(t / 10000^(2i/dim)), channel 2i+1 the cosine."""
    if dim % 2:
        raise ValueError(f"absolute encoding needs an even feature dim, got {dim}")
    t = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((n, dim))
    table[:, 0::2] = np.sin(t * freq)
    table[:, 1::2] = np.cos(t * freq)
    return table
