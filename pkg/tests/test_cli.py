import csv
import json

import pytest

from rcvae.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main


def write_config(tmp_path, **over):
    cfg = {"name": "t", "output_dir": str(tmp_path / "run"), "H": 4, "W": 4, "n_cycles": 5,
           "data": {"n_batteries": 4, "n_points": 40},
           "model": {"embed_dim": 4, "latent_dim": 2, "hidden": 8, "enc_layers": 3, "dec_layers": 3},
           "train": {"max_epochs": 4, "patience": 3, "batch_size": 8},
           "hpo": {"budget": 2, "trial_epochs": 2},
           "analyze": {"k": 2, "iterations": 150, "svg": False}}
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_preprocess_manifest(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["preprocess", "--config", cfg]) == EXIT_OK
    out = tmp_path / "run" / "t"
    m = rows(out / "manifest.csv")
    assert m[0] == ["index", "battery_id", "eol", "ecl", "split"]
    splits = [r[4] for r in m[1:]]
    assert len(splits) == 20
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (12, 3, 5)
    assert json.loads((out / "config.json").read_text())["n_cycles"] == 5


def test_preprocess_idempotent(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run" / "t"
    main(["preprocess", "--config", cfg])
    first = [(out / f).read_bytes() for f in ("manifest.csv", "dataset.bin", "scaler.csv", "config.json")]
    main(["preprocess", "--config", cfg])
    assert first == [(out / f).read_bytes() for f in ("manifest.csv", "dataset.bin", "scaler.csv", "config.json")]


def test_missing_metadata_is_config_error(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("battery_id\n")
    cfg = write_config(tmp_path, data={"source": "csv", "csv": str(data), "metadata": str(tmp_path / "nope.csv")})
    assert main(["preprocess", "--config", cfg]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path, bogus=1)
    assert main(["preprocess", "--config", cfg]) == EXIT_CONFIG


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["preprocess", "--config", cfg, "--n-cycles", "4", "--set", "model.hidden=12"]) == EXIT_OK
    eff = json.loads((tmp_path / "run" / "t" / "config.json").read_text())
    assert eff["n_cycles"] == 4 and eff["model"]["hidden"] == 12
    assert len(rows(tmp_path / "run" / "t" / "manifest.csv")) == 1 + 16


def test_missing_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    main(["preprocess", "--config", cfg])
    for cmd in (["evaluate"], ["ablate"], ["analyze"], ["generate", "--eol", "800", "--ecl", "20"]):
        assert main(cmd + ["--config", cfg]) == EXIT_MISSING


def test_train_without_dataset(tmp_path):
    assert main(["train", "--config", write_config(tmp_path)]) == EXIT_MISSING


def test_numeric_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, train={"max_epochs": 3, "patience": 2, "batch_size": 8, "lr": 1e300})
    main(["preprocess", "--config", cfg])
    assert main(["train", "--config", cfg]) == 4


def test_pipeline_and_generate(tmp_path, caplog):
    cfg = write_config(tmp_path)
    out = tmp_path / "run" / "t"
    for cmd in ("preprocess", "hpo", "train", "evaluate", "ablate", "analyze"):
        assert main([cmd, "--config", cfg]) == EXIT_OK, cmd
    assert main(["generate", "--config", cfg, "--eol", "800", "--ecl", "20", "--count", "5"]) == EXIT_OK
    gen = rows(out / "generated.csv")
    assert gen[0][1:] == ["t_index", "voltage_V", "current_rate_C", "temperature_degC", "charge_capacity_Ah"]
    assert len(gen) == 1 + 5 * 16
    assert "matched to" in (out / "log.txt").read_text()
    assert rows(out / "metrics.csv")[0][0] == "detach"
    assert len(rows(out / "ablation.csv")) == 1 + 2 + 2 + 2
    assert (out / "best_hparams.json").exists() and (out / "hpo_trials.csv").exists()
