import json

import numpy as np
import pytest
import yaml

from rramsnn.cli import main
from rramsnn.config import DEFAULTS, config_hash, dotted_overrides, load_config, parse_duration
from rramsnn.errors import ConfigError

TINY = {
    "task": "synth_temporal",
    "dataset": {"classes": 3, "T": 15, "channels": 6, "jitter": 1.0, "n_train": 60, "n_test": 30},
    "network": {"hidden": [8]},
    "training": {"epochs": 2, "learning_rate": 0.005, "batch_size": 20},
    "evaluation": {"read_seeds": 2, "times": ["0s", "1h"]},
    "faults": {"bers": [0.0, 0.01], "fault_seeds": 2, "retrain_epochs": 1},
    "ablation": {"substrate_seeds": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_durations():
    assert parse_duration("5s") == 5.0
    assert parse_duration("1h") == 3600.0
    assert parse_duration("250ms") == 0.25
    assert parse_duration("2.5") == 2.5
    assert parse_duration(7) == 7.0
    with pytest.raises(ConfigError):
        parse_duration("soon")


def test_dotted_overrides_parse_yaml_scalars():
    over = dotted_overrides(["training.epochs=3", "network.hidden=[4, 4]", "task=ecg"])
    assert over == {"training": {"epochs": 3}, "network": {"hidden": [4, 4]}, "task": "ecg"}
    with pytest.raises(ConfigError):
        dotted_overrides(["nonsense"])


def test_precedence_defaults_file_flags(tiny_config):
    cfg = load_config(tiny_config, {"training": {"epochs": 9}})
    assert cfg["training"]["epochs"] == 9
    assert cfg["dataset"]["T"] == 15
    assert cfg["training"]["optimizer"] == DEFAULTS["training"]["optimizer"]


def test_unknown_key_lists_valid_keys(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("training:\n  epoch: 3\n")
    with pytest.raises(ConfigError, match="epochs"):
        load_config(p)
    assert main(["--config", str(p), "device-check"]) == 2
    assert "valid keys here" in capsys.readouterr().err


def test_bad_task_and_missing_file_exit_2(tmp_path):
    assert main(["--set", "task=speech", "device-check"]) == 2
    assert main(["--run-dir", str(tmp_path), "energy", "--ckpt", str(tmp_path / "none.npz")]) == 2


def test_config_hash_is_stable():
    assert config_hash(load_config()) == config_hash(load_config())
    assert config_hash(load_config()) != config_hash(load_config(None, {"task": "ecg"}))


def test_divergence_exits_3(tiny_config, tmp_path):
    code = main(["--config", str(tiny_config), "--set", "training.divergence_factor=0.001",
                 "--run-dir", str(tmp_path / "r"), "train"])
    assert code == 3


def test_train_transfer_eval_flow(tiny_config, tmp_path, capsys):
    run = tmp_path / "run"
    base = ["--config", str(tiny_config), "--set", "device.noiseless=true", "--run-dir", str(run)]
    assert main(base + ["train", "--out", str(run / "model.npz")]) == 0
    assert main(base + ["transfer", "--ckpt", str(run / "model.npz"), "--out", str(run / "arr.npz")]) == 0
    assert main(base + ["eval", "--array", str(run / "arr.npz"), "--at", "0s", "--at", "1h", "--seeds", "2"]) == 0
    out = json.loads((run / "eval.json").read_text())
    accs = {r["accuracy"] for r in out["rows"]}
    # a noise-free array reads back the dequantized weights at every time
    assert accs == {out["dequantized_software_accuracy"]}
    assert out["provenance"]["config"]["device"]["noiseless"] is True
    assert out["provenance"]["config_hash"] == config_hash(out["provenance"]["config"])
    assert (run / "eval.png").exists()
    lines = (run / "eval.csv").read_text().splitlines()
    assert lines[0].startswith("# version:") and lines[1].startswith("# config:")
    assert lines[2] == "time,t_seconds,read_seed,accuracy"


def test_ablate_csv_header_and_rows(tiny_config, tmp_path):
    run = tmp_path / "abl"
    assert main(["--config", str(tiny_config), "--run-dir", str(run), "ablate", "--task", "synth_temporal"]) == 0
    rows = [ln for ln in (run / "ablation.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == "model,weights,synth_temporal_mean,synth_temporal_std,n_seeds"
    models = [r.split(",")[0] for r in rows[1:]]
    assert models[0] == "ANN" and models[-1] == "NHC" and "NC" in models and "Hom" in models
    assert all(r.endswith(",2") for r in rows[1:])


def test_default_run_dir_is_stamped_with_hash(tiny_config, tmp_path):
    out = tmp_path / "runs"
    assert main(["--config", str(tiny_config), "--set", f"run.out_dir={out}", "--set", "training.epochs=1",
                 "train"]) == 0
    (d,) = list(out.iterdir())
    cfg = json.loads((d / "train_metrics.json").read_text())["provenance"]["config"]
    assert d.name.endswith(f"-train-{config_hash(cfg)}")


def test_recover_and_ber_sweep_commands(tiny_config, tmp_path):
    run = tmp_path / "f"
    base = ["--config", str(tiny_config), "--run-dir", str(run)]
    assert main(base + ["train", "--out", str(run / "m.npz")]) == 0
    assert main(base + ["ber-sweep", "--ckpt", str(run / "m.npz"), "--bers", "0,0.05", "--seeds", "1"]) == 0
    sweep = json.loads((run / "ber_sweep.json").read_text())
    assert [c["ber"] for c in sweep["curve"]] == [0.0, 0.05] and sweep["curve"][0]["n"] == 1
    assert main(base + ["recover", "--ckpt", str(run / "m.npz"), "--ber", "0.1", "--epochs", "1"]) == 0
    rep = json.loads((run / "recovery.json").read_text())
    assert rep["frozen_weights_unchanged"] and len(rep["epochs"]) == 1
    assert main(base + ["energy", "--ckpt", str(run / "m.npz")]) == 0
    e = json.loads((run / "energy.json").read_text())["energy"]
    assert np.isclose(e["e_total"], e["e_rram"] + e["e_neuron"] + e["e_static"])
