"""Tests for the run configuration."""

from __future__ import annotations

import json

import pytest

from mmagg.config import (
    RunConfig,
    check_against_model,
    load_run_config,
    parse_run_config,
    resolve_modalities,
)
from mmagg.const import DEFAULT_HIDDEN_SIZE, DEFAULT_LR, DEFAULT_SAMPLE_SIZE
from mmagg.datastore import ModalitySpec
from mmagg.exceptions import ConfigError


def test_defaults():
    config = load_run_config(None)
    assert config == RunConfig()
    assert config.hidden_size == DEFAULT_HIDDEN_SIZE
    assert config.sample_size == DEFAULT_SAMPLE_SIZE
    assert config.optimizer["lr"] == DEFAULT_LR
    assert config.modalities is None


def test_load_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps({"modalities": ["b"], "clusters": {"b": 5}, "epochs": 0, "optimizer": {"lr": 0.01}}),
        encoding="utf-8",
    )
    config = load_run_config(path)
    assert config.modalities == ("b",)
    assert config.clusters == {"b": 5}
    assert config.epochs == 0
    assert config.optimizer["lr"] == 0.01
    assert config.optimizer["beta2"] == 0.999


@pytest.mark.parametrize(
    "raw",
    [
        {"hidden_size": 0},
        {"sample_size": 1.5},
        {"modalities": []},
        {"modalities": ["a", "a"]},
        {"clusters": {"a": 0}},
        {"optimizer": {"beta1": 1.0}},
        {"optimizer": {"momentum": 0.9}},
        {"unknown_key": 1},
        {"seed": -1},
        {"timeline_step_s": 0},
    ],
)
def test_invalid_values(raw):
    with pytest.raises(ConfigError):
        parse_run_config(raw)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read"):
        load_run_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(broken)


def test_overrides():
    config = RunConfig().with_overrides(lr=0.5, modalities=["a"], epochs=3, seed=None)
    assert config.optimizer["lr"] == 0.5
    assert config.modalities == ("a",)
    assert config.epochs == 3
    assert config.seed == RunConfig().seed
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(colour="blue")
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(batch_size=0)


def test_resolve_modalities(dataset):
    assert resolve_modalities(RunConfig(), dataset) == list(dataset.modalities)
    chosen = resolve_modalities(parse_run_config({"modalities": ["b"], "clusters": {"b": 4}}), dataset)
    assert [(spec.name, spec.clusters) for spec in chosen] == [("b", 4)]
    reordered = resolve_modalities(parse_run_config({"modalities": ["b", "a"]}), dataset)
    assert [spec.name for spec in reordered] == ["a", "b"]
    with pytest.raises(ConfigError):
        resolve_modalities(parse_run_config({"modalities": ["audio"]}), dataset)
    with pytest.raises(ConfigError):
        resolve_modalities(parse_run_config({"clusters": {"audio": 3}}), dataset)


def test_check_against_model(dataset):
    check_against_model(list(dataset.modalities), dataset)
    with pytest.raises(ConfigError, match="not in the manifest"):
        check_against_model([ModalitySpec("audio", 3, 1.0, 2)], dataset)
    with pytest.raises(ConfigError, match="dim"):
        check_against_model([ModalitySpec("a", 4, 1.0, 2)], dataset)
