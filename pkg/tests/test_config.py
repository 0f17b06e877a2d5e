"""Tests for MorphXAI config loading, presets, and env var overrides."""

import json

import pytest

from morphxai.config import PRESET_DESK, PRESETS, RunConfig
from morphxai.errors import ConfigError


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    """No stray morphxai.json or MORPHXAI_* variables."""
    monkeypatch.chdir(tmp_path)
    for name in ("MORPHXAI_OUTPUT_ROOT", "MORPHXAI_SEED", "MORPHXAI_DEVICE", "MORPHXAI_LAMBDA", "MORPHXAI_PROGRESS"):
        monkeypatch.delenv(name, raising=False)


class TestDefaults:
    def test_desk_defaults(self):
        cfg = RunConfig.load()
        assert cfg.preset == "desk"
        assert cfg.model.hidden_dim == 64
        assert cfg.model.num_queries == 30
        assert cfg.loss.lambda_morph == 0.5
        assert cfg.matching.w_l1 == 5.0

    def test_desk_preset_values(self):
        assert PRESET_DESK["model.image_size"] == 256
        assert PRESET_DESK["scene.image_size"] == [256, 256]

    def test_all_presets_exist(self):
        for name in ("desk", "overfit", "full"):
            assert name in PRESETS


class TestPresets:
    def test_full_scale(self):
        p = PRESETS["full"]
        assert (p["model.hidden_dim"], p["model.num_queries"], p["model.num_decoder_layers"]) == (256, 300, 6)
        assert p["train.batch_size"] == 12 and p["train.epochs"] == 50

    def test_overfit_is_small(self):
        cfg = RunConfig.load(overrides={"preset": "overfit"})
        assert cfg.data.n_train == 8
        assert cfg.train.eval_split == "train"
        assert cfg.model.image_size == cfg.scene.image_size[0] == 128

    def test_from_dict_applies_values(self):
        cfg = RunConfig.from_dict({**PRESETS["overfit"], "preset": "overfit"})
        assert cfg.preset == "overfit"
        assert cfg.optim.lr == 5e-4
        assert cfg.scene.parasites_per_image == (1, 2)


class TestLoadFromFile:
    def test_load_from_json(self, tmp_path):
        config_file = tmp_path / "custom.json"
        config_file.write_text(json.dumps({"loss.lambda_morph": 2.0, "train.epochs": 3}))
        cfg = RunConfig.load(str(config_file))
        assert cfg.loss.lambda_morph == 2.0
        assert cfg.train.epochs == 3

    def test_local_file_picked_up(self, tmp_path):
        (tmp_path / "morphxai.json").write_text(json.dumps({"seed": 9}))
        assert RunConfig.load().seed == 9

    def test_missing_explicit_path(self):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load("/nonexistent/path/morphxai.json")

    def test_load_preset_from_file(self, tmp_path):
        config_file = tmp_path / "custom.json"
        config_file.write_text(json.dumps({"preset": "overfit"}))
        assert RunConfig.load(str(config_file)).model.num_queries == 10

    def test_unknown_preset(self, tmp_path):
        config_file = tmp_path / "custom.json"
        config_file.write_text(json.dumps({"preset": "huge"}))
        with pytest.raises(ConfigError, match="huge"):
            RunConfig.load(str(config_file))

    def test_nested_difficulty_key(self, tmp_path):
        config_file = tmp_path / "custom.json"
        config_file.write_text(json.dumps({"scene.attribute_difficulty.curvature": 0.7}))
        cfg = RunConfig.load(str(config_file))
        assert cfg.scene.attribute_difficulty["curvature"] == 0.7
        assert cfg.scene.attribute_difficulty["shape_type"] == 0.0

    def test_unknown_keys_warned(self, capsys):
        RunConfig.from_dict({"model.colour": 1, "nonsense": 2})
        assert "model.colour" in capsys.readouterr().err

    def test_bad_value_is_config_error(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model.not_a_field": 1, "scene.image_size": 5})

    def test_not_a_json_object(self, tmp_path):
        config_file = tmp_path / "custom.json"
        config_file.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            RunConfig.load(str(config_file))


class TestValidation:
    def test_image_sizes_must_agree(self):
        with pytest.raises(ConfigError, match="image_size"):
            RunConfig.load(overrides={"scene.image_size": [128, 128]})

    def test_alpha_length_must_match_layers(self):
        with pytest.raises(ConfigError, match="alpha_layers"):
            RunConfig.load(overrides={"loss.alpha_layers": [1.0, 1.0]})

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            RunConfig.load(overrides={"loss.lambda_morph": -0.1})

    def test_threshold_range(self):
        RunConfig.load(overrides={"eval.score_threshold": 1.01})
        with pytest.raises(ConfigError):
            RunConfig.load(overrides={"eval.score_threshold": 1.5})


class TestEnvVarOverrides:
    def test_lambda_env_var(self, monkeypatch):
        monkeypatch.setenv("MORPHXAI_LAMBDA", "1.0")
        assert RunConfig.load().loss.lambda_morph == 1.0

    def test_progress_env_var(self, monkeypatch):
        monkeypatch.setenv("MORPHXAI_PROGRESS", "false")
        assert RunConfig.load().train.progress is False

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv("MORPHXAI_SEED", "abc")
        with pytest.raises(ConfigError, match="MORPHXAI_SEED"):
            RunConfig.load()

    def test_env_var_overrides_file(self, tmp_path, monkeypatch):
        (tmp_path / "morphxai.json").write_text(json.dumps({"seed": 60}))
        monkeypatch.setenv("MORPHXAI_SEED", "5")
        assert RunConfig.load().seed == 5

    def test_cli_overrides_env(self, monkeypatch):
        monkeypatch.setenv("MORPHXAI_SEED", "5")
        assert RunConfig.load(overrides={"seed": 6}).seed == 6


class TestPaths:
    def test_relative_paths_resolve_against_output_root(self, tmp_path):
        cfg = RunConfig.load(overrides={"paths.output_root": str(tmp_path / "out")})
        assert cfg.path("data_dir") == tmp_path / "out" / "data"
        assert cfg.checkpoint_dir == tmp_path / "out" / "runs" / "default" / "checkpoints"
        assert cfg.log_file.name == "train.log"

    def test_absolute_path_kept(self, tmp_path):
        cfg = RunConfig.load(overrides={"paths.report_dir": str(tmp_path / "r")})
        assert cfg.path("report_dir") == tmp_path / "r"


class TestSave:
    def test_save_and_reload(self, tmp_path):
        cfg = RunConfig.load(overrides={"loss.lambda_morph": 1.5, "scene.attribute_difficulty.dot_count": 0.4})
        saved = cfg.save(str(tmp_path / "config.json"))
        reloaded = RunConfig.load(str(saved))
        assert reloaded.loss.lambda_morph == 1.5
        assert reloaded.scene.attribute_difficulty["dot_count"] == 0.4
        assert reloaded.config_hash() == cfg.config_hash()

    def test_save_creates_directory(self, tmp_path):
        target = tmp_path / "deep" / "nested" / "config.json"
        RunConfig.load().save(str(target))
        assert target.exists()

    def test_default_save_location(self, tmp_path):
        cfg = RunConfig.load(overrides={"paths.output_root": str(tmp_path)})
        assert cfg.save() == tmp_path / "runs" / "default" / "resolved_config.json"

    def test_hash_changes_with_content(self):
        assert RunConfig.load().config_hash() != RunConfig.load(overrides={"seed": 1}).config_hash()
