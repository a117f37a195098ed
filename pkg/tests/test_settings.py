import os
import tempfile

import pytest

from dpke.errors import ConfigError
from dpke.settings import RunSettings, TrainerConfig
from tests.helpers import write_config


def test_defaults_are_desk_scale():
    config = TrainerConfig()
    assert (config.epochs_pretrain, config.epochs_semi, config.n_aug) == (30, 100, 60)
    assert (config.batch_labeled, config.batch_unlabeled) == (2, 4)
    assert config.lr_decay_epochs == (40, 60, 80, 90)
    assert config.arch.feature_dim == 192
    assert config.feature_matching_enabled
    assert not config.baseline().feature_matching_enabled


def test_learning_rate_steps_down():
    config = TrainerConfig(lr=1.0, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
    assert [config.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


def test_validation_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainerConfig(tau_obj=1.5)
    with pytest.raises(ConfigError):
        TrainerConfig(n_aug=200)
    with pytest.raises(ConfigError):
        TrainerConfig(sampling_mode="random")
    with pytest.raises(ConfigError):
        TrainerConfig(n_proposals=256)


def test_config_hash_ignores_checkpoint_cadence():
    base = TrainerConfig()
    assert base.config_hash() == TrainerConfig(checkpoint_every=5).config_hash()
    assert base.config_hash() != TrainerConfig(tau_obj=0.5).config_hash()
    assert len(base.config_hash()) == 12


def test_load_run_file():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_config(os.path.join(tmpdir, "run.cfg"), [
            "# tiny run",
            "dataset = data/dataset.jsonl",
            "epochs_semi = 8   # short",
            "n_aug = 4",
            "tau_obj = 0.5",
            "sampling_mode = LLS",
            "lr_decay_epochs = 2, 6",
            "",
        ])
        settings = RunSettings.load(path)
        assert settings.config.epochs_semi == 8
        assert settings.config.tau_obj == 0.5
        assert settings.config.sampling_mode == "LLS"
        assert settings.config.lr_decay_epochs == (2, 6)
        assert settings.path("dataset") == os.path.join(tmpdir, "data", "dataset.jsonl")
        with pytest.raises(ConfigError):
            settings.require_path("dataset")
        with pytest.raises(ConfigError):
            settings.require_path("split")

        saved = os.path.join(tmpdir, "saved.cfg")
        settings.save(saved)
        again = RunSettings.load(saved)
        assert again.config == settings.config
        assert again.paths == settings.paths


def test_load_reports_line_of_bad_key():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_config(os.path.join(tmpdir, "run.cfg"), ["n_aug = 4", "colour = red"])
        with pytest.raises(ConfigError) as info:
            RunSettings.load(path)
        assert "line 2" in str(info.value)
        path = write_config(os.path.join(tmpdir, "bad.cfg"), ["n_aug = four"])
        with pytest.raises(ConfigError):
            RunSettings.load(path)
        with pytest.raises(ConfigError):
            RunSettings.load(os.path.join(tmpdir, "missing.cfg"))


def test_overrides_skip_unset_values():
    settings = RunSettings(TrainerConfig(seed=4))
    assert settings.with_overrides(seed=None).config.seed == 4
    assert settings.with_overrides(seed=9).config.seed == 9
