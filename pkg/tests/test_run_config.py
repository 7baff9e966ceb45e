import pytest

from errors import ConfigError
from run_config_schema import (
    RUN_CONFIG_NAME,
    get_default_run_config,
    load_run_config,
    network_config_from,
    parse_run_config,
    scene_spec_from,
    training_config_from,
    validate_run_config,
    write_run_config,
)
from smrnet import NetworkConfig
from trainer import TrainingConfig


class TestDefaults:
    def test_defaults_build_every_config(self):
        config = get_default_run_config()
        assert network_config_from(config) == NetworkConfig()
        assert training_config_from(config) == TrainingConfig()
        spec = scene_spec_from(config, seed=4)
        assert spec.seed == 4
        assert spec.image_size == (64, 64)
        assert [b.bin.label for b in spec.bins] == ['small', 'middle', 'large']

    def test_defaults_are_independent_copies(self):
        first = get_default_run_config()
        first['scene']['image_size'].append(1)
        assert get_default_run_config()['scene']['image_size'] == [64, 64]


class TestValidation:
    def test_unknown_section_and_key(self):
        is_valid, errors, _ = validate_run_config({'model': {'x': '1'}, 'train': {'momentum': '0.9'}})
        assert not is_valid
        assert 'Unknown section: [model]' in errors
        assert 'Unknown key: train.momentum' in errors

    @pytest.mark.parametrize('section, key, value', [
        ('network', 'scale_bins', 'three'),
        ('network', 'stages', '0'),
        ('scene', 'image_size', '32'),
        ('scene', 'bins', 'small, huge'),
        ('train', 'shuffle', 'maybe'),
        ('train', 'optimizer', 'rmsprop'),
    ])
    def test_bad_values(self, section, key, value):
        is_valid, errors, _ = validate_run_config({section: {key: value}})
        assert not is_valid
        assert len(errors) == 1 and f"{section}.{key}" in errors[0]

    def test_values_are_coerced(self):
        is_valid, _, data = validate_run_config({
            'scene': {'image_size': '32, 48', 'veil_enabled': 'on'},
            'network': {'stage_loss_weights': '0.5, 1'},
        })
        assert is_valid
        assert data['scene']['image_size'] == [32, 48]
        assert data['scene']['veil_enabled'] is True
        assert data['network']['stage_loss_weights'] == [0.5, 1.0]


class TestParsing:
    def test_sections_comments_and_values(self):
        data = parse_run_config("# top\n[train]\nepochs = 3  # short run\n\n[scene]\nbins = small\n")
        assert data == {'train': {'epochs': '3'}, 'scene': {'bins': 'small'}}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match='duplicate'):
            parse_run_config("[train]\nepochs = 1\nepochs = 2\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match=':1:'):
            parse_run_config("epochs = 1\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_run_config("[train]\nepochs\n")

    def test_duplicate_section(self):
        with pytest.raises(ConfigError, match=':3: duplicate section'):
            parse_run_config("[train]\nepochs = 1\n[train]\nbatch_size = 2\n")

    def test_key_case_is_kept(self):
        is_valid, errors, _ = validate_run_config(parse_run_config("[train]\nEpochs = 2\n"))
        assert not is_valid
        assert errors == ['Unknown key: train.Epochs']

    def test_error_names_source_and_line(self):
        with pytest.raises(ConfigError, match=r'run\.ini:3:'):
            parse_run_config("[train]\nepochs = 1\nbatch_size\n", source='run.ini')


class TestLoadAndWrite:
    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / 'run.ini'
        path.write_text("[train]\nepochs = 5\nlearning_rate = 0.01\n")
        config = load_run_config(path, {'train.epochs': 7, 'train.batch_size': None})
        assert config['train']['epochs'] == 7
        assert config['train']['learning_rate'] == 0.01
        assert config['train']['batch_size'] == 4

    def test_invalid_file_is_rejected(self, tmp_path):
        path = tmp_path / 'run.ini'
        path.write_text("[network]\nkernel_size = -1\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_written_config_loads_back(self, tmp_path):
        config = load_run_config(overrides={
            'scene.image_size': '32,32', 'scene.veil_enabled': True, 'network.stage_loss_weights': '0.5,1.0',
            'train.optimizer': 'sgd',
        })
        path = write_run_config(config, tmp_path)
        assert path.name == RUN_CONFIG_NAME
        text = path.read_text()
        assert 'veil_enabled = on' in text
        assert load_run_config(path) == config

    def test_scene_spec_keeps_selected_bins(self):
        config = load_run_config(overrides={'scene.bins': 'middle,large', 'scene.image_size': '32,32'})
        spec = scene_spec_from(config)
        assert [b.bin.label for b in spec.bins] == ['middle', 'large']

    def test_scene_seed_from_file_and_argument(self, tmp_path):
        path = tmp_path / 'run.ini'
        path.write_text("[scene]\nseed = 11\nimage_size = 32, 32\n")
        config = load_run_config(path)
        assert scene_spec_from(config).seed == 11
        assert scene_spec_from(config, seed=2).seed == 2
        assert scene_spec_from(load_run_config()).seed == 0

    def test_unset_scene_seed_survives_a_write(self, tmp_path):
        config = load_run_config()
        assert config['scene']['seed'] is None
        assert load_run_config(write_run_config(config, tmp_path)) == config
        config['scene']['seed'] = 9
        assert load_run_config(write_run_config(config, tmp_path))['scene']['seed'] == 9
