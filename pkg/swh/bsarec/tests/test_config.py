# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

import pytest

from swh.bsarec.config import (
    OUTPUT_ROOT_ENVVAR,
    RunConfig,
    list_presets,
    parse_config_text,
    preset_path,
    schema,
)
from swh.bsarec.error import ConfigError
from swh.bsarec.model import ModelConfig
from swh.bsarec.trainer import TrainConfig


def test_defaults():
    config = RunConfig.from_mapping({})
    assert config.model_config(num_items=10) == ModelConfig(num_items=10)
    assert config.train_config() == TrainConfig()
    assert config["protocol"] == "full"
    assert config["data_path"] is None
    assert "num_items" not in schema()


def test_parse_config_text():
    text = "# comment\n\nalpha = 0.3\n  cutoff=4  \ndata_path = a b.txt\n"
    assert parse_config_text(text) == {
        "alpha": "0.3",
        "cutoff": "4",
        "data_path": "a b.txt",
    }


def test_malformed_lines_are_all_reported():
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text("alpha 0.3\ncutoff = 2\ncutoff = 3\n", origin="x.cfg")
    assert excinfo.value.problems == [
        "x.cfg:1: expected 'key = value', got 'alpha 0.3'",
        "x.cfg:3: duplicate key 'cutoff'",
    ]


def test_every_problem_is_reported():
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_mapping(
            {"alpha": "high", "epochs": "1.5", "colour": "red", "mask_history": "maybe"}
        )
    problems = excinfo.value.problems
    assert len(problems) == 4
    assert "unknown key 'colour'" in problems
    assert any(p.startswith("alpha: expected a number") for p in problems)
    assert any(p.startswith("epochs: expected an integer") for p in problems)
    assert any(p.startswith("mask_history: expected a boolean") for p in problems)


def test_invalid_values_are_reported_together():
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_mapping(
            {"alpha": "1.5", "cutoff": "40", "batch_size": "0", "protocol": "loo"}
        )
    problems = excinfo.value.problems
    assert any("alpha" in p for p in problems)
    assert any("cutoff" in p for p in problems)
    assert any("batch_size" in p for p in problems)
    assert any("protocol" in p for p in problems)


def test_parse_errors_do_not_hide_range_errors():
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_mapping({"alpha": "high", "cutoff": "40", "batch_size": "0"})
    problems = excinfo.value.problems
    assert any(p.startswith("alpha: expected a number") for p in problems)
    assert any("cutoff" in p for p in problems)
    assert any("batch_size" in p for p in problems)


def test_round_trip(tmp_path):
    config = RunConfig.from_mapping(
        {"alpha": "0.25", "beta_mode": "scalar", "data_path": "d.txt", "seed": "3"}
    )
    path = tmp_path / "run.cfg"
    path.write_text(config.dumps())
    assert RunConfig.load(str(path)) == config
    assert "alpha = 0.25\n" in config.dumps()
    assert "mask_history = true\n" in config.dumps()


def test_overrides_and_evolve(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha = 0.3\nepochs = 5\n")
    config = RunConfig.load(str(path), overrides={"alpha": 0.0})
    assert config["alpha"] == 0.0
    assert config["epochs"] == 5
    assert config.evolve(cutoff=2)["cutoff"] == 2
    with pytest.raises(ConfigError):
        config.evolve(cutoff=0)


def test_output_root(monkeypatch):
    config = RunConfig.from_mapping({"output_dir": "runs/x"})
    monkeypatch.delenv(OUTPUT_ROOT_ENVVAR, raising=False)
    assert config.output_dir() == "runs/x"
    monkeypatch.setenv(OUTPUT_ROOT_ENVVAR, "/scratch")
    assert config.output_dir() == "/scratch/runs/x"
    assert RunConfig.from_mapping({"output_dir": "/abs"}).output_dir() == "/abs"


def test_presets():
    assert list_presets() == ["beauty", "lastfm", "ml-1m", "sports", "toys", "yelp"]
    for name in list_presets():
        config = RunConfig.load(preset_path(name))
        assert config["data_path"] == f"data/{name}.txt"
        assert config["num_layers"] == 2
        assert config["hidden_size"] == 64
        assert config["batch_size"] == 256
    lastfm = RunConfig.load(preset_path("lastfm"))
    assert (lastfm["alpha"], lastfm["cutoff"], lastfm["num_heads"]) == (0.9, 3, 1)
    assert lastfm["learning_rate"] == 1e-3
    assert RunConfig.load(preset_path("ml-1m"))["cutoff"] == 9
