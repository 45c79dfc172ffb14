"""Command-line entry point: gen-data, train, eval, verify, ablate.

Exit codes: 0 ok, 1 verification or training failure, 2 invalid input, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import FormatError
from .data import SyntheticSpec, label_density, load_split, read_manifest, write_dataset
from .model import ConfigError, ModelConfig
from .train import (ABLATION_AXES, RunConfig, TrainingAborted, evaluate, format_table, load_model,
                    run_ablation, train)
from .verify import FAULTS, run_all

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("pat")


class InputError(Exception):
    pass


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return base / p


def _load_run(path) -> tuple:
    cfg_path = Path(path)
    run = RunConfig.from_dict(_read_json(cfg_path))
    if not run.manifest:
        raise InputError("manifest: run config must name a dataset manifest")
    manifest = read_manifest(_resolve(run.manifest, cfg_path.parent))
    return run, load_split(manifest, "train"), load_split(manifest, "test")


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_dict(_read_json(args.spec)).validate()
    write_dataset(spec, args.out)
    manifest = read_manifest(Path(args.out) / "manifest.json")
    for split in ("train", "test"):
        seqs = load_split(manifest, split)
        if not seqs:
            continue
        dens = label_density(seqs)
        print(f"{split} sequences={len(seqs)} density " + " ".join(f"{d:.4f}" for d in dens))
    return EXIT_OK


def cmd_train(args) -> int:
    run, train_seqs, test_seqs = _load_run(args.config)
    out_dir = args.out or run.out_dir
    result = train(run, train_seqs, test_seqs, out_dir=out_dir, emit=print)
    print(f"best epoch {result.best_epoch} map {result.best_map:.6f} checkpoint {Path(out_dir) / 'best.patw'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "model.json"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if not cfg_path.exists():
        raise FileNotFoundError(f"model config not found: {cfg_path} (pass --config)")
    cfg = ModelConfig.from_dict(_read_json(cfg_path))
    model = load_model(ckpt, cfg)
    weights = None
    if args.alpha_fine is not None:
        if not (cfg.has_fine and cfg.has_coarse):
            raise InputError(f"--alpha-fine needs both heads; structure {cfg.structure} has one")
        weights = {"fine": args.alpha_fine, "coarse": 1.0 - args.alpha_fine}
    seqs = load_split(read_manifest(args.manifest), args.split)
    if not seqs:
        raise InputError(f"manifest has no {args.split!r} sequences")
    report = evaluate(model, seqs, weights)
    print(report.to_json())
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(args.fault)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("verify: " + ("all suites passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate(args) -> int:
    run, train_seqs, test_seqs = _load_run(args.config)
    result = run_ablation(args.axis, run, train_seqs, test_seqs, seeds=args.seeds, emit=print)
    print(format_table(result))
    out = Path(args.out or run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.json").write_text(json.dumps(result, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the run config's output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="model config JSON (default: model.json beside the checkpoint)")
    p.add_argument("--alpha-fine", type=float, dest="alpha_fine")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical self-checks")
    p.add_argument("--fault", choices=FAULTS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train every variant along one axis")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (InputError, ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
