import json

import pytest

from avtts.config import ConfigError, RunConfig, load_config


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig().with_paths(data=tmp_path / "d")
    cfg.write(tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.paths["data"] == str(tmp_path / "d")


def test_unknown_section_and_keys(tmp_path):
    with pytest.raises(ConfigError, match="sections"):
        RunConfig.from_dict({"optimiser": {}})
    with pytest.raises(ConfigError, match=r"\[model\].*depth"):
        RunConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError, match="paths"):
        RunConfig.from_dict({"paths": {"cache": "x"}})


def test_invalid_value_reported_with_section():
    with pytest.raises(ConfigError, match=r"\[train\]"):
        RunConfig.from_dict({"train": {"mel_loss": "l3"}})


def test_overrides_parse_json_values():
    cfg = RunConfig().override(["train.lr=0.002", "model.hidden=64", "train.mel_loss=mse", "paths.data=/x"])
    assert cfg.train.lr == 0.002 and cfg.model.hidden == 64 and cfg.train.mel_loss == "mse"
    assert cfg.paths["data"] == "/x"


@pytest.mark.parametrize("bad", ["lr=1", "train.=3", "train.lr", "galaxy.size=2"])
def test_malformed_overrides(bad):
    with pytest.raises(ConfigError):
        RunConfig().override([bad])


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text(json.dumps([1]))
    with pytest.raises(ConfigError, match="object"):
        load_config(tmp_path / "list.json")


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"batch_size": 4}}))
    cfg = load_config(tmp_path / "c.json", ["train.seed=9"])
    assert cfg.train.batch_size == 4 and cfg.train.seed == 9 and cfg.model == RunConfig().model
