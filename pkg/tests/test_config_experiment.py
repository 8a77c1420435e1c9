import csv
import json
from pathlib import Path

import pytest
import yaml

from sptrlab import config as cfgmod
from sptrlab.cli import main
from sptrlab.exceptions import ConfigError
from sptrlab.experiment import load_grid, run, run_experiment, sweep

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "encoder": {"n_layers": 4},
    "prompts": {"depth": 2, "n_templates": 8},
    "data": {"n_classes": 4, "samples_per_class": 12, "shots": 2},
    "run": {"epochs": 3},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def test_empty_document_gives_defaults():
    cfg = cfgmod.resolve({})
    assert cfg == cfgmod.DEFAULTS
    assert cfg is not cfgmod.DEFAULTS


def test_default_file_matches_defaults():
    assert cfgmod.load(CONFIGS / "default.yaml") == cfgmod.DEFAULTS


@pytest.mark.parametrize("raw, key", [
    ({"optimizer": {"lr": 1}}, "optimizer"),
    ({"loss": {"alpah": 0.3}}, "loss.alpah"),
    ({"loss": {"tau": "warm"}}, "loss.tau"),
    ({"prompts": {"depth": 13}}, "prompts.depth"),
    ({"prompts": {"length": 2.5}}, "prompts.length"),
    ({"ot": {"enabled": "yes"}}, "ot.enabled"),
    ({"attack": {"target": "both"}}, "attack.target"),
    ({"attack": {"norm": 1}}, "attack.norm"),
    ({"data": {"shots": 100}}, "data.shots"),
    ({"run": {"epochs": None}}, "run.epochs"),
])
def test_invalid_values_name_the_key(raw, key):
    with pytest.raises(ConfigError) as info:
        cfgmod.resolve(raw)
    assert info.value.key == key


def test_fraction_strings():
    cfg = cfgmod.resolve({"attack": {"epsilon": "8/255", "step_size": "1/255", "norm": 2}})
    assert cfg["attack"]["epsilon"] == 8 / 255
    assert cfg["attack"]["step_size"] == 1 / 255
    assert cfg["attack"]["norm"] == 2.0


def test_dump_round_trips():
    cfg = cfgmod.resolve({"loss": {"alpha": 0.1}, "attack": {"epsilon": "4/255"}})
    assert cfgmod.resolve(yaml.safe_load(cfgmod.dump(cfg))) == cfg
    assert list(yaml.safe_load(cfgmod.dump(cfg))) == list(cfgmod.SECTIONS)


def test_digest_tracks_values():
    a = cfgmod.resolve({})
    assert cfgmod.digest(a) == cfgmod.digest(cfgmod.resolve({}))
    assert cfgmod.digest(a) != cfgmod.digest(cfgmod.set_path(a, "loss.alpha", 0.5))


def test_unparsable_yaml(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("loss: [unclosed\n")
    with pytest.raises(ConfigError):
        cfgmod.load(bad)


def test_ablation_configs_differ_only_in_toggles():
    base, ot, full = (cfgmod.load(CONFIGS / f"ablation_{n}.yaml") for n in ("baseline", "ot", "full"))
    toggles = {("ot", "enabled"), ("loss", "sp_enabled")}

    def strip(cfg):
        return {(s, k): v for s in cfg for k, v in cfg[s].items() if (s, k) not in toggles}
    assert strip(base) == strip(ot) == strip(full)
    assert (base["ot"]["enabled"], base["loss"]["sp_enabled"]) == (False, False)
    assert (ot["ot"]["enabled"], ot["loss"]["sp_enabled"]) == (True, False)
    assert (full["ot"]["enabled"], full["loss"]["sp_enabled"]) == (True, True)


@pytest.mark.parametrize("grid, key, values", [
    ("grid_length.yaml", "prompts.length", [1, 2, 4, 6, 8]),
    ("grid_depth.yaml", "prompts.depth", [1, 3, 5, 7, 9, 11]),
    ("grid_epsilon.yaml", "attack.epsilon", [1 / 255, 4 / 255, 8 / 255]),
    ("grid_alpha.yaml", "loss.alpha", [0.1, 0.3, 0.5]),
])
def test_grid_axes(grid, key, values):
    _, runs = load_grid(CONFIGS / grid)
    section, name = key.split(".")
    assert [cfg[section][name] for _, cfg in runs] == values
    assert len({n for n, _ in runs}) == len(runs)


def test_ablation_grid_is_product_over_seeds():
    _, runs = load_grid(CONFIGS / "grid_ablation.yaml")
    assert len(runs) == 4 * 5
    combos = {(c["ot"]["enabled"], c["loss"]["sp_enabled"]) for _, c in runs}
    assert combos == {(False, False), (False, True), (True, False), (True, True)}


def test_grid_rejects_unknown_keys(tmp_path):
    path = tmp_path / "g.yaml"
    path.write_text("axes: {loss.alpha: [0.1]}\nrepeat: 3\n")
    with pytest.raises(ConfigError):
        load_grid(path)


def test_run_payload_and_audits():
    cfg = cfgmod.resolve(SMALL)
    payload = run(cfg)
    assert payload["base_classes"] == [0, 1] and payload["novel_classes"] == [2, 3]
    assert payload["touched_classes"] == [0, 1]
    assert payload["n_train"] == 4
    assert payload["n_train"] + payload["n_eval"] == 48
    assert len(payload["epochs"]) == 3
    f = payload["final"]
    assert 0 <= f["base_acc"] <= 1 and 0 <= f["novel_acc"] <= 1


def test_fewshot_task_uses_all_classes():
    cfg = cfgmod.set_path(cfgmod.resolve(SMALL), "run.task", "fewshot")
    payload = run(cfg)
    assert payload["base_classes"] == [0, 1, 2, 3] and payload["novel_classes"] == []
    assert payload["final"]["novel_acc"] is None and payload["final"]["hm"] is None


def test_output_files_are_byte_identical(small_config, tmp_path):
    run_experiment(small_config, tmp_path / "a", seed=3)
    run_experiment(small_config, tmp_path / "b", seed=3)
    for name in ("metrics.json", "epochs.csv", "config.resolved"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["seed"] == 3
    rows = list(csv.DictReader((tmp_path / "a" / "epochs.csv").read_text().splitlines()))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert cfgmod.load(tmp_path / "a" / "config.resolved")["run"]["seed"] == 3


def test_sweep_writes_summary(tmp_path, small_config):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"base": small_config.name, "axes": {"loss.alpha": [0.1, 0.5]},
                                    "seeds": [0]}))
    rows = sweep(grid, tmp_path / "out")
    assert [r["run"] for r in rows] == ["alpha=0.1/seed_0", "alpha=0.5/seed_0"]
    assert (tmp_path / "out" / "alpha=0.1" / "seed_0" / "metrics.json").exists()
    with open(tmp_path / "out" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_cli_run(small_config, tmp_path, capsys):
    assert main(["run", "--config", str(small_config), "--out", str(tmp_path / "r"), "--task", "fewshot"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["novel_acc"] is None
    assert (tmp_path / "r" / "metrics.json").exists()


def test_cli_unknown_key_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("loss:\n  alpah: 0.3\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["key"] == "loss.alpah"


def test_cli_missing_file_exits_nonzero(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "r")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_cli_divergence_reports_epoch_and_term(tmp_path, capsys):
    path = tmp_path / "hot.yaml"
    path.write_text(yaml.safe_dump({**SMALL, "loss": {"tau": 1e-310}}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "NonFiniteLossError" and err["epoch"] == 1 and err["term"] == "sp"


def test_cli_selftest_subset(capsys):
    assert main(["selftest", "--only", "loss_identities"]) == 0
    assert "[PASS] loss_identities" in capsys.readouterr().out
