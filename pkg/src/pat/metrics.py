"""Per-frame mean average precision over dense multi-label grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def average_precision(scores, labels) -> float | None:
    """All-points AP; ties rank the lower original index first. None if no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-D shapes")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


@dataclass
class EvalBatch:
    predictions: np.ndarray
    labels: np.ndarray
    offsets: list = field(default_factory=list)

    def __post_init__(self):
        if self.predictions.shape != self.labels.shape or self.predictions.ndim != 2:
            raise ValueError(f"predictions {self.predictions.shape} vs labels {self.labels.shape}")

    @classmethod
    def from_sequences(cls, pairs) -> "EvalBatch":
        preds, labels, offsets, pos = [], [], [], 0
        for p, g in pairs:
            preds.append(np.asarray(p, dtype=np.float64))
            labels.append(np.asarray(g, dtype=np.uint8))
            offsets.append(pos)
            pos += len(p)
        return cls(np.concatenate(preds), np.concatenate(labels), offsets)


@dataclass
class MapReport:
    map: float
    per_class_ap: list
    n_frames: int
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps({"map": self.map, "per_class_ap": self.per_class_ap, "n_frames": self.n_frames,
                           "config_hash": self.config_hash}, indent=2)


def per_frame_map(batch: EvalBatch, config_hash: str = "") -> MapReport:
    aps = [average_precision(batch.predictions[:, c], batch.labels[:, c]) for c in range(batch.labels.shape[1])]
    defined = [a for a in aps if a is not None]
    if not defined:
        raise ValueError("no class has a positive frame; mAP is undefined")
    return MapReport(float(np.mean(defined)), aps, int(batch.labels.shape[0]), config_hash)
