"""Slow, straight-line reference computations used to check the fast paths."""

from __future__ import annotations

import math

import numpy as np


def relpos_bias_naive(q: np.ndarray, table: np.ndarray, n_max: int) -> np.ndarray:
    """Double loop over (n, m) summing q[n, d] * table[clip(n - m) + n_max - 1, d]."""
    n_tok, dh = q.shape
    out = np.zeros((n_tok, n_tok))
    for n in range(n_tok):
        for m in range(n_tok):
            r = min(max(n - m, -(n_max - 1)), n_max - 1) + n_max - 1
            acc = 0.0
            for d in range(dh):
                acc += q[n, d] * table[r, d]
            out[n, m] = acc
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    for i, row in enumerate(z):
        e = [math.exp(v - max(row)) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def mhsa_reference(x, w_q, w_k, w_v, w_o, heads, table=None, n_max=None, residual=None):
    """Per-head loop over the attention equations with a naive relative bias."""
    n, dim = x.shape
    dh = dim // heads
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ w_q[:, cols], x @ w_k[:, cols], x @ w_v[:, cols]
        logits = q @ k.T
        if table is not None:
            logits = logits + relpos_bias_naive(q, table, n_max)
        outs.append(softmax_rows(logits / math.sqrt(dh)) @ v)
    return np.concatenate(outs, axis=1) @ w_o + (x if residual is None else residual)


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def average_precision_brute(scores, labels) -> float | None:
    """AP from each positive's rank, counted pairwise (ties go to the lower index)."""
    n = len(scores)
    pos = [i for i in range(n) if labels[i] == 1]
    if not pos:
        return None

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    total = 0.0
    for i in pos:
        r = rank(i)
        hits = sum(1 for j in pos if rank(j) <= r)
        total += hits / r
    return total / len(pos)


def map_brute(preds: np.ndarray, labels: np.ndarray) -> float:
    aps = [average_precision_brute(list(preds[:, c]), list(labels[:, c])) for c in range(labels.shape[1])]
    aps = [a for a in aps if a is not None]
    return sum(aps) / len(aps)
