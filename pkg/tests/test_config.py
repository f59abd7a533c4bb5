# tests/test_config.py
import os

import pytest
import yaml

from markerforge.config_manager import ConfigManager, LOG_ENV_VAR
from markerforge.config_utils import DEFAULT_SETTINGS, load_settings, save_settings
from markerforge.errors import ConfigError

SETTINGS_YAML = os.path.join(os.path.dirname(__file__), '..', 'markerforge', 'settings.yaml')


def test_shipped_settings_match_defaults():
    assert load_settings(SETTINGS_YAML) == DEFAULT_SETTINGS


def test_empty_file_means_no_overrides(tmp_path):
    path = tmp_path / 'empty.yaml'
    path.write_text('')
    assert load_settings(str(path)) == DEFAULT_SETTINGS


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('not_a_setting: 3\n')
    with pytest.raises(ConfigError):
        load_settings(str(path))


def test_values_are_coerced_to_default_types(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('workers: "4"\nssim_sigma: 2\ncanvas_size: [320, 240]\n')
    settings = load_settings(str(path))
    assert settings['workers'] == 4
    assert isinstance(settings['ssim_sigma'], float)
    assert settings['canvas_size'] == [320, 240]


def test_bad_type_raises(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('workers: many\n')
    with pytest.raises(ConfigError):
        load_settings(str(path))


def test_invalid_range_raises(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('scale_range: [1.5, 0.5]\n')
    with pytest.raises(ConfigError):
        load_settings(str(path))


def test_missing_file_raises():
    with pytest.raises(ConfigError):
        load_settings('/nonexistent/markerforge.yaml')


def test_flags_override_file(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('seed: 5\nworkers: 2\n')
    config = ConfigManager(str(path), {'seed': 9, 'workers': None})
    assert config.get_setting('seed') == 9
    assert config.get_setting('workers') == 2


def test_override_is_validated():
    with pytest.raises(ConfigError):
        ConfigManager(None, {'workers': 0})


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv(LOG_ENV_VAR, 'DEBUG')
    assert ConfigManager().get_log_level() == 'DEBUG'
    monkeypatch.delenv(LOG_ENV_VAR)
    assert ConfigManager().get_log_level() == 'INFO'


def test_sampler_config_from_settings():
    config = ConfigManager(None, {'canvas_size': [320, 240], 'sample_count': 7})
    sampler = config.get_sampler_config()
    assert sampler.canvas_size == (320, 240)
    assert sampler.sample_count == 7
    assert 'workers' not in sampler.to_dict()


def test_save_settings_round_trip(tmp_path):
    path = tmp_path / 'out' / 'settings.yaml'
    save_settings(DEFAULT_SETTINGS, str(path))
    with open(path, encoding='utf-8') as f:
        assert yaml.safe_load(f)['seed'] == 0
    assert load_settings(str(path)) == DEFAULT_SETTINGS
