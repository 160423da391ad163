import json
from pathlib import Path

import pytest

from fewshot_ad.cli import build_parser, config_from_args
from fewshot_ad.config import CACHE_ENV, RunConfig, load_config, resolve_config
from fewshot_ad.errors import ConfigError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"t_ratio": 0.4, "beta": 0.25}))
    return path


def _parse(*argv):
    return config_from_args(build_parser().parse_args(["eval", "data", *argv]))


def test_defaults():
    config = RunConfig()
    assert (config.t_ratio, config.alpha, config.beta, config.bank_capacity) == (0.3, 1.0, 0.5, 30)
    assert config.shots == 8 and config.seeds == [0, 1, 2, 3, 4]
    assert _parse().to_dict() == config.to_dict()


def test_file_overlays_defaults(config_file):
    config = _parse("--config", str(config_file))
    assert config.t_ratio == 0.4 and config.beta == 0.25
    assert config.alpha == 1.0


def test_flag_overlays_file(config_file):
    config = _parse("--config", str(config_file), "--t-ratio", "0.2")
    assert config.t_ratio == 0.2
    assert config.beta == 0.25
    assert _parse("--t-ratio", "0.2").beta == 0.5


def test_list_flags():
    config = _parse("--seeds", "3", "4", "--image-size", "16", "24", "--shot-sweep", "1", "2")
    assert config.seeds == [3, 4]
    assert config.image_size == [16, 24]
    assert config.shot_sweep == [1, 2]


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "typo.json"
    path.write_text(json.dumps({"t_raito": 0.4}))
    with pytest.raises(ConfigError, match="t_raito"):
        load_config(path)
    with pytest.raises(ConfigError):
        resolve_config(overrides={"gamma": 1.0})


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    listy = tmp_path / "list.json"
    listy.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listy)


@pytest.mark.parametrize("kwargs", [
    {"t_ratio": 0.0},
    {"t_ratio": 1.0},
    {"t_ratio_bank": 1.5},
    {"bank_capacity": 4, "shots": 8},
    {"bank_capacity": 30, "shot_sweep": [2, 4, 40]},
    {"shots": 0},
    {"seeds": []},
    {"temperature": 0.0},
    {"image_size": [4, 4]},
    {"beta_start": 0.2, "beta_end": 0.1},
    {"epochs": 0},
    {"generated_count": -1},
])
def test_validation(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_config_hash_ignores_execution_settings(tmp_path):
    base = RunConfig()
    assert RunConfig(workers=4, timing=True, cache_dir=str(tmp_path)).config_hash() == base.config_hash()
    assert RunConfig(t_ratio=0.4).config_hash() != base.config_hash()


def test_cache_location(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "env"))
    assert RunConfig().cache_root() == tmp_path / "env"
    assert RunConfig(cache_dir=str(tmp_path / "flag")).cache_root() == tmp_path / "flag"


def test_shipped_config_matches_defaults():
    assert resolve_config(Path(__file__).parent / "run_config.json").to_dict() == RunConfig().to_dict()
