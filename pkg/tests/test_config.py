"""INI-style config loading, overrides and validation."""

from __future__ import annotations

from pathlib import Path

import pytest

from core.config import BackboneConfig, DecoderConfig, EncoderConfig, RunConfig, load_config
from core.errors import ConfigError
from core.models import PoolMode, RotationMode

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestLoadConfig:
    def test_defaults_without_a_file(self):
        cfg = load_config()
        assert cfg == RunConfig()
        assert cfg.optimizer.base_lr == pytest.approx(0.3)
        assert cfg.optimizer.schedule_factors == [1.0, 0.3, 0.1, 0.01, 1e-3, 1e-4]
        assert cfg.detection.min_shape_points == 500

    @pytest.mark.parametrize("name", ["desk.cfg", "indoor.cfg"])
    def test_presets_load(self, name):
        cfg = load_config(CONFIGS / name)
        assert cfg.encoder.embedding_dim == cfg.decoder.embedding_dim

    def test_desk_values(self):
        cfg = load_config(CONFIGS / "desk.cfg")
        assert cfg.optimizer.schedule_factors == [1.0, 0.3, 0.1]
        assert cfg.optimizer.grad_clip_norm == pytest.approx(10.0)
        assert cfg.train.scale_range == (0.9, 1.1)
        assert cfg.detection.rotation_mode is RotationMode.YAW
        assert cfg.backbone.pool_mode is PoolMode.AVERAGE
        assert cfg.detection.min_shape_points == 100

    def test_overrides_win_over_file(self):
        cfg = load_config(CONFIGS / "desk.cfg", {"detection.k": "8", "run.seed": "3"})
        assert cfg.detection.k == 8
        assert cfg.run.seed == 3

    def test_comma_list_override(self):
        cfg = load_config(overrides={"backbone.encoder_channels": "4,6"})
        assert cfg.backbone.encoder_channels == [4, 6]

    def test_comma_in_a_string_value_is_kept(self):
        cfg = load_config(overrides={"train.prior_checkpoint": "runs/prior,v2.npz"})
        assert cfg.train.prior_checkpoint == "runs/prior,v2.npz"

    def test_single_item_list_override(self):
        cfg = load_config(overrides={"backbone.encoder_channels": "6"})
        assert cfg.backbone.encoder_channels == [6]

    def test_none_value(self):
        cfg = load_config(overrides={"detection.symmetry": "none"})
        assert cfg.detection.symmetry is None

    def test_echo_lists_every_section(self):
        text = load_config().echo()
        for section in RunConfig.model_fields:
            assert f"[{section}]" in text
        assert 'rotation_mode = "yaw"' in text


class TestConfigErrors:
    def test_unknown_section(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[planets]\nseed = 1\n")
        with pytest.raises(ConfigError, match="planets"):
            load_config(path)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(overrides={"optimizer.learning_rate": "0.1"})

    def test_override_needs_a_section(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"seed": "1"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_embedding_dims_must_agree(self):
        with pytest.raises(ConfigError, match="embedding_dim"):
            load_config(overrides={"encoder.embedding_dim": "16"})

    def test_bad_precision(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"run.precision": "half"})

    def test_bad_type(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"detection.k": "many"})


class TestPresets:
    def test_full_size_networks(self):
        assert BackboneConfig.full_size().out_channels == 64
        assert len(BackboneConfig.full_size().encoder_channels) == 7
        cfg = RunConfig(encoder=EncoderConfig.full_size(), decoder=DecoderConfig.full_size())
        assert cfg.encoder.embedding_dim == cfg.decoder.embedding_dim == 128
