"""Synthetic dense multi-label sequences and the PATF feature-file format.

Each class owns a unit-norm signature vector; a token is the sum of the
signatures of the classes active at that step plus Gaussian noise. Classes
are split into short/medium/long duration tiers so that different temporal
scales matter.

With ``position_sensitive`` set, the last two classes share one signature and
only appear after a cue span of the same length: every token of a "near"
instance has a cue token exactly ``gap_near`` steps earlier, every token of a
"far" instance one ``gap_far`` steps earlier. Without positional information
the two are indistinguishable.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import BadMagic, FormatError, TruncatedPayload, VersionMismatch

FEAT_MAGIC = b"PATF"
FEAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")


class InfeasiblePlacement(ValueError):
    pass


@dataclass
class FeatureSequence:
    tokens: np.ndarray  # (T, D) float32
    labels: np.ndarray  # (T, C) uint8
    seq_id: str = ""
    cues: np.ndarray | None = None  # cue token positions, position-sensitive task only

    def __post_init__(self):
        if self.tokens.shape[0] != self.labels.shape[0]:
            raise ValueError(f"tokens {self.tokens.shape} and labels {self.labels.shape} differ in length")

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class SyntheticSpec:
    classes: int = 8
    dim: int = 16
    seq_len: int = 128
    tier_means: tuple = (4, 12, 32)
    instances: float = 6.0
    noise: float = 0.3
    overlap: bool = True
    position_sensitive: bool = False
    gap_near: int = 12
    gap_far: int = 28
    pair_duration: int = 6
    cue_events: float = 2.0
    n_train: int = 200
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        self.tier_means = tuple(int(m) for m in self.tier_means)

    def validate(self) -> "SyntheticSpec":
        if self.classes < 1 or self.dim < 1 or self.seq_len < 1:
            raise ValueError("classes, dim and seq_len must be positive")
        if any(m < 1 for m in self.tier_means):
            raise ValueError("duration means must be >= 1")
        if self.noise < 0 or self.instances < 0:
            raise ValueError("noise and instance rate must be nonnegative")
        if max(self.tier_means) + max(self.tier_means) // 2 > self.seq_len:
            raise InfeasiblePlacement(
                f"infeasible placement: duration up to {max(self.tier_means) * 3 // 2} exceeds seq_len {self.seq_len}")
        if self.position_sensitive:
            if self.classes < 3:
                raise ValueError("position-sensitive task needs at least 3 classes")
            if not 0 < self.gap_near < self.gap_far:
                raise ValueError("need 0 < gap_near < gap_far")
            if self.gap_far + self.pair_duration > self.seq_len:
                raise InfeasiblePlacement("infeasible placement: cue gap plus duration exceeds seq_len")
        if self.dim < self.classes + 1:
            raise ValueError("dim must exceed the number of classes so signatures stay distinct")
        return self

    @property
    def regular_classes(self) -> int:
        return self.classes - 2 if self.position_sensitive else self.classes

    def duration_range(self, c: int) -> tuple:
        mean = self.tier_means[c % len(self.tier_means)]
        return max(1, mean - mean // 2), mean + mean // 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tier_means"] = list(self.tier_means)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)


def standard_task(**overrides) -> SyntheticSpec:
    """Desk-scale dense multi-label task: 8 classes in three duration tiers."""
    return SyntheticSpec(**overrides).validate()


def position_task(**overrides) -> SyntheticSpec:
    """Task whose last two classes can only be told apart by their distance from a cue.

    Both gaps exceed the receptive field of the desk model's convolutions, so
    the pair cannot be separated by local context alone. Regular classes are
    left out so the pair carries the whole training signal.
    """
    base = dict(position_sensitive=True, gap_near=24, gap_far=40, pair_duration=8, cue_events=6.0, instances=0.0)
    base.update(overrides)
    return SyntheticSpec(**base).validate()


def signatures(spec: SyntheticSpec, rng: np.random.Generator) -> tuple:
    """Class signatures (C, D) and the cue signature (D,), all unit norm.

    Signatures are orthonormalized random directions, so they are pairwise
    distinct except for the deliberately shared position-sensitive pair.
    """
    raw = rng.normal(size=(spec.dim, spec.classes + 1))
    q, _ = np.linalg.qr(raw)
    basis = q.T[: spec.classes + 1]
    sig = basis[: spec.classes].copy()
    cue = basis[spec.classes].copy()
    if spec.position_sensitive:
        sig[spec.classes - 1] = sig[spec.classes - 2]
    return sig, cue


def render_tokens(labels: np.ndarray, sig: np.ndarray, cue: np.ndarray | None = None,
                  cues: np.ndarray | None = None) -> np.ndarray:
    """Noise-free tokens: active-class signatures summed, cue signature added at cue steps."""
    tokens = labels.astype(np.float64) @ sig
    if cues is not None and len(cues):
        tokens[cues] += cue
    return tokens


def _one_sequence(spec: SyntheticSpec, sig, cue, rng: np.random.Generator, seq_id: str) -> FeatureSequence:
    T, C = spec.seq_len, spec.classes
    labels = np.zeros((T, C), dtype=np.uint8)
    busy = np.zeros(T, dtype=bool)
    for _ in range(rng.poisson(spec.instances)):
        c = int(rng.integers(spec.regular_classes))
        lo, hi = spec.duration_range(c)
        dur = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, T - dur + 1))
        if not spec.overlap and busy[start:start + dur].any():
            continue
        labels[start:start + dur, c] = 1
        busy[start:start + dur] = True
    cues = []
    if spec.position_sensitive:
        near, far = C - 2, C - 1
        for _ in range(rng.poisson(spec.cue_events)):
            c = near if rng.random() < 0.5 else far
            gap = spec.gap_near if c == near else spec.gap_far
            p = int(rng.integers(0, T - gap - spec.pair_duration + 1))
            cues.extend(range(p, p + spec.pair_duration))
            labels[p + gap:p + gap + spec.pair_duration, c] = 1
    cues = np.array(sorted(set(cues)), dtype=np.int64)
    tokens = render_tokens(labels, sig, cue, cues)
    if spec.noise > 0:
        tokens = tokens + spec.noise * rng.normal(size=tokens.shape)
    return FeatureSequence(tokens.astype(np.float32), labels, seq_id, cues)


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> list:
    """Train sequences followed by test sequences; each gets its own sub-seed."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed if seed is None else seed)
    sig_seed, *seq_seeds = root.spawn(1 + spec.n_train + spec.n_test)
    sig, cue = signatures(spec, np.random.default_rng(sig_seed))
    out = []
    for i, ss in enumerate(seq_seeds):
        split = "train" if i < spec.n_train else "test"
        idx = i if split == "train" else i - spec.n_train
        out.append(_one_sequence(spec, sig, cue, np.random.default_rng(ss), f"{split}_{idx:04d}"))
    return out


def _coverage(rate: float, durations, T: int, shift: int = 0, span: int | None = None) -> float:
    """Expected labelled fraction for Poisson(rate) intervals of uniform duration and start.

    Poisson thinning makes the count covering a frame Poisson too, so a frame
    is labelled with probability 1 - exp(-rate * p_t).
    """
    hit = np.zeros(T)
    for dur in durations:
        n_starts = (T - dur + 1) if span is None else span
        for s in range(n_starts):
            hit[s + shift:s + shift + dur] += 1.0 / (n_starts * len(durations))
    return float(np.mean(1.0 - np.exp(-rate * hit)))


def expected_density(spec: SyntheticSpec) -> np.ndarray:
    """Per-class expected fraction of labelled frames, overlaps between instances merged."""
    dens = np.zeros(spec.classes)
    T = spec.seq_len
    for c in range(spec.regular_classes):
        lo, hi = spec.duration_range(c)
        dens[c] = _coverage(spec.instances / spec.regular_classes, range(lo, hi + 1), T)
    if spec.position_sensitive:
        for gap, c in ((spec.gap_near, -2), (spec.gap_far, -1)):
            span = T - gap - spec.pair_duration + 1
            dens[c] = _coverage(spec.cue_events / 2, [spec.pair_duration], T, gap, span)
    return dens


def sample_clip(seq: FeatureSequence, length: int, rng: np.random.Generator) -> FeatureSequence:
    """Uniformly placed contiguous window of exactly ``length`` steps."""
    if len(seq) < length:
        raise ValueError(f"sequence {seq.seq_id!r} has {len(seq)} steps, clip needs {length}")
    start = int(rng.integers(0, len(seq) - length + 1))
    cues = None
    if seq.cues is not None:
        cues = seq.cues[(seq.cues >= start) & (seq.cues < start + length)] - start
    return FeatureSequence(seq.tokens[start:start + length], seq.labels[start:start + length], seq.seq_id, cues)


# ---------------------------------------------------------------- PATF files

def encode_features(seq: FeatureSequence) -> bytes:
    T, D = seq.tokens.shape
    C = seq.labels.shape[1]
    return (HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, D, C)
            + np.ascontiguousarray(seq.tokens, dtype="<f4").tobytes()
            + np.ascontiguousarray(seq.labels, dtype=np.uint8).tobytes())


def decode_features(buf: bytes, seq_id: str = "") -> FeatureSequence:
    if len(buf) < 4 or buf[:4] != FEAT_MAGIC:
        raise BadMagic("bad magic: not a PATF feature file")
    if len(buf) < HEADER.size:
        raise TruncatedPayload("truncated header")
    _, version, T, D, C = HEADER.unpack_from(buf)
    if version != FEAT_VERSION:
        raise VersionMismatch(f"feature file version {version}, expected {FEAT_VERSION}")
    need = HEADER.size + T * D * 4 + T * C
    if len(buf) < need:
        raise TruncatedPayload(f"truncated payload: {len(buf)} bytes, need {need}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes")
    tokens = np.frombuffer(buf, dtype="<f4", count=T * D, offset=HEADER.size).reshape(T, D).astype(np.float32)
    labels = np.frombuffer(buf, dtype=np.uint8, count=T * C, offset=HEADER.size + T * D * 4).reshape(T, C).copy()
    if not np.isin(labels, (0, 1)).all():
        raise FormatError("labels must be 0 or 1")
    return FeatureSequence(tokens, labels, seq_id)


def write_features(path, seq: FeatureSequence) -> None:
    with open(path, "wb") as f:
        f.write(encode_features(seq))


def read_features(path) -> FeatureSequence:
    with open(path, "rb") as f:
        return decode_features(f.read(), Path(path).stem)


# ---------------------------------------------------------------- manifests

def write_dataset(spec: SyntheticSpec, out_dir) -> dict:
    """Generate, write one PATF file per sequence, and write manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqs = generate_synthetic(spec)
    entries = []
    for seq in seqs:
        split = seq.seq_id.split("_")[0]
        rel = f"{split}/{seq.seq_id}.patf"
        (out_dir / split).mkdir(exist_ok=True)
        write_features(out_dir / rel, seq)
        entries.append({"id": seq.seq_id, "path": rel, "split": split})
    manifest = {"spec": spec.to_dict(), "sequences": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list:
    root = Path(manifest["root"])
    return [read_features(root / e["path"]) for e in manifest["sequences"] if e["split"] == split]


def label_density(seqs) -> np.ndarray:
    labels = np.concatenate([s.labels for s in seqs])
    return labels.mean(axis=0)
