"""Tests for configuration parsing, overrides, and round trips."""

import pytest

from sogvg.config import (
    DataConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    write_config,
)
from sogvg.errors import ConfigError


class TestDefaults:
    def test_reference_defaults(self):
        cfg = RunConfig()
        assert cfg.model.d_m == 256
        assert cfg.model.k == 6
        assert cfg.model.p == 0.5
        assert cfg.model.dilations == (1, 6, 12)
        assert cfg.model.edge_strategy == "erc"
        assert cfg.model.node_strategy == "knr"
        assert cfg.model.sog_enabled
        assert cfg.train.lambda_off == 5.0
        assert cfg.data.n_train == 2000
        cfg.validate()

    def test_text_width_follows_visual_width(self):
        assert ModelConfig(d_m=96).resolved_d_t() == 96
        assert ModelConfig(d_m=96, d_t=32).resolved_d_t() == 32


class TestFileParsing:
    def test_partial_file_overrides_defaults(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(
            "[encoders]\nd_m = 32\ntrunk_widths = 4, 8, 16, 24, 32\n"
            "[sog]\nenabled = false\n"
            "[training]\nlr = 0.001\n"
        )
        cfg = load_config(path)
        assert cfg.model.d_m == 32
        assert cfg.model.trunk_widths == (4, 8, 16, 24, 32)
        assert not cfg.model.sog_enabled
        assert cfg.train.lr == 0.001
        assert cfg.train.batch_size == 16  # untouched default

    def test_unknown_section_names_valid_ones(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(ConfigError, match="training"):
            load_config(path)

    def test_unknown_key_names_valid_ones(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[training]\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="lr"):
            load_config(path)

    def test_unparseable_value_is_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[training]\nbatch_size = many\n")
        with pytest.raises(ConfigError, match="batch_size"):
            load_config(path)

    def test_missing_file_is_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_invalid_combination_fails_validation(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[sog]\np = 1.5\n")
        with pytest.raises(ConfigError, match="p must"):
            load_config(path)


class TestOverrides:
    def test_dotted_overrides(self):
        cfg = apply_overrides(
            RunConfig(), ["sog.k=4", "training.lr=0.01", "sog.edge_strategy=reverse"]
        )
        assert cfg.model.k == 4
        assert cfg.train.lr == 0.01
        assert cfg.model.edge_strategy == "reverse"

    def test_boolean_spellings(self):
        for spelling, expected in (("off", False), ("1", True), ("no", False)):
            cfg = apply_overrides(RunConfig(), [f"sog.enabled={spelling}"])
            assert cfg.model.sog_enabled is expected

    def test_augmentation_keys(self):
        cfg = apply_overrides(
            RunConfig(), ["training.max_shift=32", "training.dihedral=true"]
        )
        assert cfg.train.max_shift == 32
        assert cfg.train.dihedral is True
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["training.max_shift=-1"])
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["training.dihedral=maybe"])

    def test_bad_override_shapes(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["training.lr"])
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["lr=0.1"])
        with pytest.raises(ConfigError, match="edge_strategy"):
            apply_overrides(RunConfig(), ["sog.edge_strategy=shuffle"])


class TestRoundTrips:
    def test_dump_and_reload_is_exact(self, tmp_path):
        cfg = RunConfig(
            model=ModelConfig(d_m=48, d_t=32, k=5, p=0.37, edge_strategy="average"),
            train=TrainConfig(lr=3.3e-4, weight_decay=0.05, epochs=7),
            data=DataConfig(seed=9, n_train=12, n_val=3, n_test=3, image_size=96),
        )
        path = tmp_path / "echo.ini"
        write_config(cfg, path)
        assert load_config(path) == cfg

    def test_dump_covers_every_schema_key(self):
        text = dump_config(RunConfig())
        for section in ("[encoders]", "[sog]", "[head]", "[training]", "[dataset]"):
            assert section in text
        for key in ("d_m", "enabled", "lambda_off", "weight_decay", "hard_fraction"):
            assert f"{key} = " in text

    def test_dict_round_trip(self):
        cfg = RunConfig(model=ModelConfig(d_m=24, trunk_widths=(2, 4, 6, 8, 10)))
        rebuilt = config_from_dict(config_to_dict(cfg))
        assert rebuilt == cfg
        assert isinstance(rebuilt.model.trunk_widths, tuple)


class TestValidation:
    def test_model_bounds(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_m=0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(k=0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(node_strategy="bag").validate()

    def test_train_bounds(self):
        TrainConfig(lr=0.0).validate()  # frozen training is allowed
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1e-4).validate()
        with pytest.raises(ConfigError):
            TrainConfig(grad_clip=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()

    def test_data_bounds(self):
        with pytest.raises(ConfigError):
            DataConfig(image_size=100).validate()
        with pytest.raises(ConfigError):
            DataConfig(min_objects=2).validate()
        with pytest.raises(ConfigError):
            DataConfig(min_objects=5, max_objects=4).validate()
        with pytest.raises(ConfigError):
            DataConfig(hard_fraction=1.2).validate()
        with pytest.raises(ConfigError):
            DataConfig(n_val=0).validate()
