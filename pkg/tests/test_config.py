import dataclasses

import pytest
import tomli

from psmb.config import (
    TrainConfig,
    config_digest,
    config_from_dict,
    config_to_toml,
    load_config,
    save_config,
    validate_config,
)


class TestDefaults:
    def test_desk_scale_recipe(self):
        cfg = TrainConfig()
        assert cfg.encoder.patch_size == 4
        assert cfg.encoder.d == 64 and cfg.encoder.depth == 4 and cfg.encoder.n == 8
        assert cfg.views.res == {"G": 32, "M": 20, "L": 12}
        assert cfg.views.grid("G", 4) == (8, 8)
        assert cfg.views.grid("M", 4) == (5, 5)
        assert cfg.views.grid("L", 4) == (3, 3)
        assert cfg.distill.n_prototypes == 256
        assert cfg.optim.batch_size == 12
        assert cfg.optim.epochs == 20
        assert cfg.optim.clip_norm == 5.0
        assert cfg.optim.weight_decay >= 0.0

    def test_defaults_validate(self):
        validate_config(TrainConfig())


class TestRoundTrip:
    def test_emitted_text_is_valid_toml(self):
        text = config_to_toml(TrainConfig())
        parsed = tomli.loads(text)
        assert set(parsed) == {"encoder", "views", "mpa", "distill", "optim", "run"}

    def test_file_round_trip_equality(self, tmp_path):
        cfg = TrainConfig()
        path = tmp_path / "train.toml"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_round_trip_preserves_edits(self, tmp_path):
        cfg = TrainConfig()
        cfg = dataclasses.replace(
            cfg,
            optim=dataclasses.replace(cfg.optim, lr=1.0 / 3.0, epochs=7),
            mpa=dataclasses.replace(cfg.mpa, mode="per_scale", row_normalize=False),
        )
        path = tmp_path / "edited.toml"
        save_config(path, cfg)
        back = load_config(path)
        assert back == cfg
        assert back.optim.lr == 1.0 / 3.0
        assert back.mpa.row_normalize is False

    def test_partial_file_fills_defaults(self, tmp_path):
        path = tmp_path / "partial.toml"
        path.write_text("[optim]\nlr = 0.9\n")
        cfg = load_config(path)
        assert cfg.optim.lr == 0.9
        assert cfg.optim.epochs == TrainConfig().optim.epochs
        assert cfg.views == TrainConfig().views

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.toml")


class TestRejection:
    def test_unknown_key_names_section(self):
        with pytest.raises(ValueError, match=r"learning_rate.*\[optim\]"):
            config_from_dict({"optim": {"learning_rate": 0.1}})

    def test_unknown_section(self):
        with pytest.raises(ValueError, match=r"\[optimizer\]"):
            config_from_dict({"optimizer": {"lr": 0.1}})

    def test_bad_mode_rejected_by_section_dataclass(self):
        with pytest.raises(ValueError, match="positional mode"):
            config_from_dict({"mpa": {"mode": "learned"}})

    def test_validate_rejects_indivisible_resolution(self):
        cfg = config_from_dict({"views": {"res": {"G": 30, "M": 20, "L": 12}}})
        with pytest.raises(ValueError, match="not divisible"):
            validate_config(cfg)

    def test_validate_rejects_negative_lr(self):
        cfg = config_from_dict({"optim": {"lr": -0.1}})
        with pytest.raises(ValueError, match="lr"):
            validate_config(cfg)

    def test_zero_lr_and_zero_epochs_are_legal(self):
        cfg = config_from_dict({"optim": {"lr": 0.0, "epochs": 0}})
        validate_config(cfg)


class TestDigest:
    def test_digest_stable(self):
        assert config_digest(TrainConfig()) == config_digest(TrainConfig())

    def test_digest_tracks_content(self):
        cfg = TrainConfig()
        other = dataclasses.replace(
            cfg, optim=dataclasses.replace(cfg.optim, lr=0.41))
        assert config_digest(cfg) != config_digest(other)

    def test_digest_survives_round_trip(self, tmp_path):
        cfg = TrainConfig()
        path = tmp_path / "cfg.toml"
        save_config(path, cfg)
        assert config_digest(load_config(path)) == config_digest(cfg)
