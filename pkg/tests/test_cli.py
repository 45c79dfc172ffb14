import json

import pytest

from pat.cli import main
from pat.model import ModelConfig

SPEC = dict(classes=3, dim=6, seq_len=24, tier_means=[2, 4, 8], instances=3.0, n_train=6, n_test=3, seed=1)
MODEL = dict(clip_len=16, input_dim=6, model_dim=8, blocks=1, heads=2, branches=2, classes=3,
             alpha_fine=0.5, alpha_coarse=0.5)


@pytest.fixture
def dataset(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data" / "manifest.json"


@pytest.fixture
def run_config(tmp_path, dataset):
    cfg = dict(model=MODEL, manifest=str(dataset), epochs=2, batch_size=2, lr=1e-3, out_dir=str(tmp_path / "run"))
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_prints_density(tmp_path, capsys, dataset):
    out = capsys.readouterr().out
    assert "train sequences=6 density" in out and "test sequences=3" in out
    assert (tmp_path / "data" / "train" / "train_0000.patf").exists()


def test_gen_data_infeasible_spec(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps(dict(SPEC, tier_means=[2, 4, 40])))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "infeasible" in capsys.readouterr().err


def test_gen_data_missing_spec(tmp_path):
    assert main(["gen-data", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 3


def test_train_then_eval_matches_logged_map(tmp_path, capsys, run_config):
    capsys.readouterr()
    assert main(["train", "--config", str(run_config)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("epoch 0 lr 0.001 loss ")
    run_dir = tmp_path / "run"
    for name in ("model.json", "run.json", "last.patw", "best.patw", "best.json"):
        assert (run_dir / name).exists()
    best = json.loads((run_dir / "best.json").read_text())
    assert main(["eval", "--ckpt", str(run_dir / "best.patw"), "--manifest",
                 str(tmp_path / "data" / "manifest.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"map", "per_class_ap", "n_frames", "config_hash"}
    assert report["map"] == best["map"]
    assert report["n_frames"] == 3 * 24
    assert report["config_hash"] == ModelConfig(**MODEL).digest()

    assert main(["eval", "--ckpt", str(run_dir / "best.patw"), "--manifest",
                 str(tmp_path / "data" / "manifest.json"), "--alpha-fine", "1.0"]) == 0
    assert json.loads(capsys.readouterr().out)["n_frames"] == 72


def test_eval_without_model_config(tmp_path, capsys, run_config):
    main(["train", "--config", str(run_config)])
    ckpt = tmp_path / "run" / "best.patw"
    (tmp_path / "run" / "model.json").unlink()
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(tmp_path / "data" / "manifest.json")]) == 3
    assert "model config" in capsys.readouterr().err


def test_eval_config_mismatch_names_field(tmp_path, capsys, run_config):
    main(["train", "--config", str(run_config)])
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(MODEL, model_dim=12)))
    code = main(["eval", "--ckpt", str(tmp_path / "run" / "best.patw"), "--manifest",
                 str(tmp_path / "data" / "manifest.json"), "--config", str(other)])
    assert code == 2
    assert "model_dim" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path, run_config):
    main(["train", "--config", str(run_config)])
    ckpt = tmp_path / "run" / "best.patw"
    ckpt.write_bytes(b"JUNK" + ckpt.read_bytes()[4:])
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(tmp_path / "data" / "manifest.json")]) == 3


def test_train_rejects_bad_config(tmp_path, capsys, dataset):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(dict(model=dict(MODEL, heads=3), manifest=str(dataset))))
    assert main(["train", "--config", str(path)]) == 2
    assert "model_dim" in capsys.readouterr().err
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == 2


def test_verify_passes_and_catches_fault(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "all suites passed" in out and "PASS skew" in out
    assert main(["verify", "--fault", "bias-sign"]) == 1
    assert "FAIL skew" in capsys.readouterr().out


def test_ablate_writes_table(tmp_path, capsys, run_config):
    assert main(["ablate", "--axis", "loss", "--config", str(run_config), "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "variant" in out and "bce" in out and "asymmetric" in out
    result = json.loads((tmp_path / "run" / "ablation_loss.json").read_text())
    assert set(result["rows"]) == {"bce", "asymmetric"}


def test_unknown_axis_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axis", "colour", "--config", "x"])
    assert exc.value.code == 2
