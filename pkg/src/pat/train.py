"""Training, evaluation and ablation sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import load_weights, save_weights
from .data import sample_clip
from .loss import LossParams, total_loss
from .metrics import EvalBatch, MapReport, per_frame_map
from .model import PAT, ConfigError, ModelConfig, build_variant, infer_dims
from .optim import ParamSet, StepDecay, adam_step

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "encoding": [{"encoding": "relative"}, {"encoding": "absolute"}, {"encoding": "none"}],
    "structure": [{"structure": "full"}, {"structure": "v1_hierarchical"}, {"structure": "v2_from_tokens"}],
    "loss": [{"loss": "bce"}, {"loss": "asymmetric"}],
    "modules": [{"structure": "tokens_only", "encoding": "none"}, {"structure": "fdm_only"},
                {"structure": "cdm_only"}, {"structure": "full"}],
}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    manifest: str = ""
    epochs: int = 30
    batch_size: int = 3
    lr: float = 1e-4
    lr_decay: float = 10.0
    lr_decay_every: int = 7
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 1 or self.lr_decay_every < 1:
            raise ConfigError("epochs and lr_decay_every must be >= 1")

    @property
    def schedule(self) -> StepDecay:
        return StepDecay(self.lr, self.lr_decay, self.lr_decay_every)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_run(**overrides) -> RunConfig:
    """Run settings for the desk profile; the published lr schedule is tuned for far longer runs."""
    base = dict(model=ModelConfig.desk(), epochs=30, batch_size=3, lr=3e-3, lr_decay=10.0, lr_decay_every=20)
    base.update(overrides)
    return RunConfig(**base)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    map: float

    def line(self) -> str:
        return f"epoch {self.epoch} lr {self.lr:.6g} loss {self.loss:.6f} map {self.map:.6f}"


@dataclass
class TrainResult:
    history: list
    best_map: float
    best_epoch: int
    model: PAT

    @property
    def initial_loss(self) -> float:
        return self.history[0].loss

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss

    @property
    def final_map(self) -> float:
        return self.history[-1].map


def evaluate(model: PAT, seqs, weights: dict | None = None) -> MapReport:
    """Per-frame mAP over full sequences, frames pooled across sequences per class."""
    pairs = [(model.predict(s.tokens, weights), s.labels) for s in seqs]
    return per_frame_map(EvalBatch.from_sequences(pairs), model.cfg.digest())


def prior_baseline_map(train_seqs, test_seqs) -> float:
    """mAP of predicting each class's training-set frequency at every frame."""
    prior = np.concatenate([s.labels for s in train_seqs]).mean(axis=0)
    pairs = [(np.broadcast_to(prior, s.labels.shape), s.labels) for s in test_seqs]
    return per_frame_map(EvalBatch.from_sequences(pairs)).map


def train_step(model: PAT, ps: ParamSet, clips, lr: float, loss_params: LossParams) -> float:
    cfg = model.cfg
    weights = cfg.head_weights()
    batch_loss = None
    for clip in clips:
        pred = model(clip.tokens)
        term = total_loss(clip.labels, pred.heads, weights, loss_params)
        batch_loss = term if batch_loss is None else batch_loss + term
    batch_loss = batch_loss * (1.0 / len(clips))
    value = float(batch_loss.data)
    if not math.isfinite(value):
        raise tn.NonFiniteError("training loss is not finite")
    batch_loss.backward()
    adam_step(ps, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return value


def train(run: RunConfig, train_seqs, test_seqs, out_dir=None, emit=None) -> TrainResult:
    """Train with Adam and step decay; one random clip per training sequence per epoch.

    Model initialization and data ordering draw from separate streams of the
    run seed, so variants trained with the same seed see identical clips.
    """
    cfg = run.model
    init_ss, data_ss = np.random.SeedSequence(run.seed).spawn(2)
    model = build_variant(cfg, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    ps = ParamSet(model.parameters())
    loss_params = LossParams.from_config(cfg)
    schedule = run.schedule
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.json").write_text(cfg.to_json())
        (out / "run.json").write_text(json.dumps(run.to_dict(), indent=2))
    emit = emit or (lambda line: log.info(line))

    for s in train_seqs:
        if len(s) < cfg.clip_len:
            raise ConfigError(f"clip_len: sequence {s.seq_id} shorter than {cfg.clip_len}")

    history, best_map, best_epoch = [], -1.0, -1
    for epoch in range(run.epochs):
        lr = schedule(epoch)
        order = data_rng.permutation(len(train_seqs))
        losses = []
        model.train()
        for i in range(0, len(order), run.batch_size):
            clips = [sample_clip(train_seqs[j], cfg.clip_len, data_rng) for j in order[i:i + run.batch_size]]
            try:
                losses.append(train_step(model, ps, clips, lr, loss_params))
            except tn.NonFiniteError as exc:
                emit(f"abort epoch {epoch}: {exc}")
                raise TrainingAborted(f"non-finite loss at epoch {epoch}; last good checkpoint kept") from exc
        report = evaluate(model, test_seqs)
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), report.map)
        history.append(rec)
        emit(rec.line())
        if out:
            save_weights(out / "last.patw", model.state_dict())
        if report.map > best_map:
            best_map, best_epoch = report.map, epoch
            if out:
                save_weights(out / "best.patw", model.state_dict())
                (out / "best.json").write_text(json.dumps({"epoch": epoch, "map": report.map}))
    return TrainResult(history, best_map, best_epoch, model)


def load_model(ckpt_path, cfg: ModelConfig) -> PAT:
    """Rebuild a model from its config and load weights, naming the first divergent field on mismatch."""
    state = load_weights(ckpt_path)
    dims = infer_dims(state)
    for key, value in dims.items():
        if getattr(cfg, key) != value:
            raise ConfigError(f"{key}: checkpoint has {value}, config has {getattr(cfg, key)}")
    model = build_variant(cfg, 0)
    try:
        model.load_state_dict(state)
    except (KeyError, tn.ShapeError) as exc:
        raise ConfigError(f"structure/encoding: checkpoint does not match config ({exc})") from exc
    return model


def variant_config(base: ModelConfig, overrides: dict) -> ModelConfig:
    return dataclasses.replace(base, **overrides).validate()


def variant_name(overrides: dict) -> str:
    return overrides.get("structure") if "structure" in overrides else next(iter(overrides.values()))


def run_ablation(axis: str, run: RunConfig, train_seqs, test_seqs, seeds=3, emit=None) -> dict:
    """Train every variant along ``axis`` for each seed; returns per-variant mAPs and means."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    emit = emit or (lambda line: log.info(line))
    rows = {}
    for overrides in ABLATION_AXES[axis]:
        name = variant_name(overrides)
        cfg = variant_config(run.model, overrides)
        maps, loss_drop = [], []
        for k in range(seeds):
            r = dataclasses.replace(run, model=cfg, seed=run.seed + k)
            res = train(r, train_seqs, test_seqs)
            maps.append(res.final_map)
            loss_drop.append(res.final_loss / res.initial_loss)
            emit(f"{axis} {name} seed {run.seed + k} map {res.final_map:.4f} loss_ratio {loss_drop[-1]:.3f}")
        rows[name] = {"maps": maps, "mean": float(np.mean(maps)), "loss_ratio": loss_drop}
    return {"axis": axis, "seeds": [run.seed + k for k in range(seeds)], "rows": rows}


def format_table(result: dict) -> str:
    seeds = result["seeds"]
    header = "variant".ljust(18) + "".join(f"seed{s}".rjust(9) for s in seeds) + "mean".rjust(9)
    lines = [header]
    for name, row in result["rows"].items():
        lines.append(name.ljust(18) + "".join(f"{m:9.4f}" for m in row["maps"]) + f"{row['mean']:9.4f}")
    return "\n".join(lines)
