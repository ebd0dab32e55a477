#!/usr/bin/env python3
"""
Tests for run_config: preset discovery, layering and validation
"""

import pytest

from capmap_errors import ArgumentError
from run_config import PresetManager, RunConfig, load_config


def test_presets_are_discovered():
    manager = PresetManager()
    assert {"default", "hemisphere"} <= set(manager.available_presets)


def test_default_preset_matches_defaults():
    assert load_config("default") == RunConfig().validate()


def test_hemisphere_preset():
    config = load_config("hemisphere")
    assert config.domain_mode == "hemisphere"
    assert config.pipeline_options().resolved_radius() == 1.0


def test_overrides_win_over_preset():
    config = load_config("hemisphere", {"domain_mode": "sphere", "lam": 0.5, "rtol": None})
    assert config.domain_mode == "sphere"
    assert config.lam == 0.5
    assert config.rtol == 0.01


def test_preset_file_path(tmp_path):
    path = tmp_path / "custom.json5"
    path.write_text("// comment\n{lam: 0.7, axis: [1, 0, 0],}\n")
    config = load_config(str(path))
    assert config.lam == 0.7
    assert config.axis == (1.0, 0.0, 0.0)


def test_unknown_key_is_rejected():
    with pytest.raises(ArgumentError, match="unknown option"):
        RunConfig.from_mapping({"lamda": 0.3})


def test_missing_preset():
    with pytest.raises(ArgumentError, match="preset not found"):
        load_config("no-such-preset")


def test_invalid_preset(tmp_path):
    path = tmp_path / "broken.json5"
    path.write_text("{lam: ")
    with pytest.raises(ArgumentError):
        load_config(str(path))


def test_non_object_preset(tmp_path):
    path = tmp_path / "list.json5"
    path.write_text("[1, 2]")
    with pytest.raises(ArgumentError):
        load_config(str(path))


@pytest.mark.parametrize("overrides", [
    {"lam": 2.0},
    {"order": -1},
    {"normalization": "area"},
    {"r_lo": 5.0},
])
def test_invalid_values(overrides):
    with pytest.raises(ArgumentError):
        load_config(overrides=overrides)
