# Copyright 2026 sparse-fuse contributors

from pathlib import Path

import pydantic
import pytest

from sparse_fuse import config
from sparse_fuse.errors import ConfigError

DESK_YAML = Path(__file__).parents[2] / "config" / "desk.yaml"


def test_defaults_are_desk_scale():
    settings = config.Settings()
    assert settings.decoder.total_instances == 90
    assert settings.decoder.temporal_instances == 60
    assert settings.decoder.num_keypoints == 13
    assert settings.decoder.num_layers == 6
    assert settings.scene.num_cameras == 6
    assert settings.scene.num_scales == 2


def test_full_scale_topology():
    cfg = config.DecoderConfig()
    assert (cfg.total_instances, cfg.temporal_instances) == (900, 600)
    assert cfg.total_instances - cfg.temporal_instances == 300


def test_desk_file_matches_defaults():
    assert config.load_settings(DESK_YAML) == config.Settings()


def test_overrides_and_seed():
    settings = config.load_settings(
        overrides=["decoder.groups=8", "bench.t_values=[1, 3]", "train.depth_supervision=no"],
        seed=7,
    )
    assert settings.decoder.groups == 8
    assert settings.bench.t_values == [1, 3]
    assert settings.train.depth_supervision is False
    assert settings.seed == 7


@pytest.mark.parametrize(
    "override",
    [
        "decoder.temporal_instances=90",
        "decoder.heads=5",
        "decoder.groups=5",
        "scene.min_range=30",
        "scene.unknown=1",
        "bench.t_values=[0]",
        "scene.channels.deep=1",
        "eval.top_k=0",
        "decoder.track_prior_s=0",
    ],
)
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        config.load_settings(overrides=[override])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load_settings(tmp_path / "absent.yaml")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("scene: [unclosed\n")
    with pytest.raises(ConfigError):
        config.load_settings(path)


def test_non_mapping_yaml(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        config.load_settings(path)


def test_empty_yaml_is_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert config.load_settings(path) == config.Settings()


def test_scale_shapes():
    scene = config.SceneConfig()
    assert scene.scale_shape(0) == (16, 32)
    assert scene.scale_shape(1) == (8, 16)


def test_run_config_rejects_malformed_override():
    with pytest.raises(pydantic.ValidationError):
        config.RunConfig(subcommand="verify", overrides=["no-equals-sign"])


def test_run_config_rejects_unknown_subcommand():
    with pytest.raises(pydantic.ValidationError):
        config.RunConfig(subcommand="serve")


@pytest.mark.parametrize("raw, expected", [("", 1), ("4", 4), (" 2 ", 2)])
def test_threads_from_env(raw, expected):
    assert config.threads_from_env({config.THREADS_ENV: raw}) == expected


def test_threads_default():
    assert config.threads_from_env({}) == 1


@pytest.mark.parametrize("raw", ["zero", "0", "-3"])
def test_threads_invalid(raw):
    with pytest.raises(ConfigError):
        config.threads_from_env({config.THREADS_ENV: raw})


def test_all_multi_frame_decoder_is_valid():
    settings = config.load_settings(overrides=["decoder.num_single_frame_layers=0"])
    assert settings.decoder.num_layers == settings.decoder.num_multi_frame_layers


def test_decoder_needs_a_layer():
    overrides = ["decoder.num_single_frame_layers=0", "decoder.num_multi_frame_layers=0"]
    with pytest.raises(ConfigError):
        config.load_settings(overrides=overrides)


def test_eval_top_k():
    assert config.EvalConfig().top_k is None
    assert config.load_settings(overrides=["eval.top_k=8"]).eval.top_k == 8
