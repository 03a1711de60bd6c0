"""Config loading, cross-field validation, hashing."""

import json

import pytest

from weavetts.config import (
    config_from_dict,
    config_hash,
    config_to_dict,
    default_config,
    load_config,
    save_config,
)
from weavetts.errors import ConfigError


def test_defaults_are_valid():
    cfg = default_config()
    assert cfg.model.d_model == 64
    assert cfg.model.n_layers == 2
    assert cfg.schedule.tokens_per_group == 1
    assert cfg.schedule.frames_per_group == 4
    assert cfg.weights.reg_weight == 2.0
    assert cfg.weights.kl_weight == 0.05
    assert cfg.weights.flux_weight == 1.0
    assert cfg.weights.stop_weight == 0.5
    assert cfg.corpus.n_utterances == 2000
    assert cfg.training.max_steps == 5000


def test_round_trip(tmp_path):
    cfg = default_config()
    path = tmp_path / "config.json"
    save_config(cfg, path)
    loaded = load_config(path)
    assert config_to_dict(loaded) == config_to_dict(cfg)
    assert config_hash(loaded) == config_hash(cfg)


def test_hash_changes_with_content(tmp_path):
    cfg = default_config()
    raw = config_to_dict(cfg)
    raw["training"]["seed"] = 99
    other = config_from_dict(raw)
    assert config_hash(other) != config_hash(cfg)


def test_partial_config_fills_defaults(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"training": {"max_steps": 10}}))
    cfg = load_config(path)
    assert cfg.training.max_steps == 10
    assert cfg.model.d_model == 64


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config sections"):
        config_from_dict({"modle": {}})


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="unknown model fields"):
        config_from_dict({"model": {"d_modle": 32}})


def test_reduction_factor_mismatch():
    raw = {"model": {"frames_per_step": 2}}
    with pytest.raises(ConfigError, match="frames_per_step"):
        config_from_dict(raw)


def test_vocab_mismatch():
    raw = {"model": {"vocab_size": 32}}
    with pytest.raises(ConfigError, match="vocab_size"):
        config_from_dict(raw)


def test_mel_mismatch():
    raw = {"model": {"n_mels": 16}}
    with pytest.raises(ConfigError, match="n_mels"):
        config_from_dict(raw)


def test_invalid_reduction_rejected():
    raw = {
        "model": {"frames_per_step": 3},
        "schedule": {"frames_per_group": 4, "frames_per_step": 3},
    }
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/config.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)
