import filecmp

import numpy as np
import pytest

from app import main
from config import Config
from commands.train import MODEL_NAME
from datagen import DatasetManifest
from errors import EXIT_IO, EXIT_OK, EXIT_VALIDATION
from run_config_schema import load_run_config
from smrnet import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from storage import read_png, write_raw
from trainer import ABLATION_CSV, TRAINING_LOG

SMALL_RUN = """\
[network]
scale_bins = 3
recurrent_iters = 1
stages = 1
feature_channels = 2
dense_layers = 1
growth_rate = 2
hidden_channels = 2

[train]
batch_size = 2
"""


@pytest.fixture(scope='module')
def rendered(tmp_path_factory):
    out = tmp_path_factory.mktemp('cli') / 'corpus'
    assert main(['render', '--out', str(out), '--count', '4', '--seed', '3', '--size', '32,32',
                 '--threads', '2']) == EXIT_OK
    return out


@pytest.fixture
def small_run(tmp_path):
    path = tmp_path / 'small.ini'
    path.write_text(SMALL_RUN)
    return path


class TestRender:
    def test_same_seed_same_tree(self, rendered, tmp_path):
        again = tmp_path / 'again'
        assert main(['render', '--out', str(again), '--count', '4', '--seed', '3', '--size', '32,32']) == EXIT_OK
        comparison = filecmp.dircmp(rendered, again)
        assert not comparison.left_only and not comparison.right_only
        _, mismatch, errors = filecmp.cmpfiles(rendered, again, comparison.common_files, shallow=False)
        assert not mismatch and not errors

    def test_prints_manifest_path(self, tmp_path, capsys):
        out = tmp_path / 'one'
        assert main(['render', '--out', str(out), '--count', '1', '--size', '32,32']) == EXIT_OK
        assert str(out / 'manifest.txt') in capsys.readouterr().out
        assert (out / 'run_config.ini').is_file()

    def test_seed_is_echoed_and_reproduces_the_corpus(self, rendered, tmp_path):
        echoed = rendered / 'run_config.ini'
        assert 'seed = 3' in echoed.read_text().split('[scene]', 1)[1].split('[train]', 1)[0]
        again = tmp_path / 'from_config'
        assert main(['render', '--out', str(again), '--count', '4', '--config', str(echoed)]) == EXIT_OK
        for entry_a, entry_b in zip(DatasetManifest.read(rendered), DatasetManifest.read(again)):
            assert entry_a.seed == entry_b.seed
            assert (rendered / entry_a.observed).read_bytes() == (again / entry_b.observed).read_bytes()

    def test_seed_falls_back_to_environment_default(self, tmp_path, monkeypatch):
        monkeypatch.setattr(Config, 'DEFAULT_SEED', 17)
        out = tmp_path / 'env'
        assert main(['render', '--out', str(out), '--count', '1', '--size', '32,32']) == EXIT_OK
        assert load_run_config(out / 'run_config.ini')['scene']['seed'] == 17

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / 'file'
        blocker.write_text('x')
        target = blocker / 'corpus'
        assert main(['render', '--out', str(target), '--count', '1', '--size', '32,32']) == EXIT_IO
        assert str(target) in capsys.readouterr().err

    def test_bad_size(self, tmp_path, capsys):
        code = main(['render', '--out', str(tmp_path / 'x'), '--count', '1', '--size', '32'])
        assert code == EXIT_VALIDATION
        assert 'scene.image_size' in capsys.readouterr().err


class TestCheck:
    def test_consistent_corpus(self, rendered, capsys):
        assert main(['check', '--corpus', str(rendered)]) == EXIT_OK
        assert 'corpus is consistent' in capsys.readouterr().out

    def test_missing_corpus(self, tmp_path):
        assert main(['check', '--corpus', str(tmp_path / 'nowhere')]) != EXIT_OK


class TestTrainAndDerain:
    def test_train_writes_model_and_log(self, rendered, small_run, tmp_path):
        out = tmp_path / 'run'
        assert main(['train', '--corpus', str(rendered), '--out', str(out), '--config', str(small_run),
                     '--epochs', '1']) == EXIT_OK
        params, config = load_checkpoint(out / MODEL_NAME)
        assert config.scale_bins == 3 and config.hidden_channels == 2
        assert len(params) == config.expected_key_count()
        assert (out / TRAINING_LOG).is_file()
        assert (out / 'epoch_001.smrc').is_file()

    def test_zero_network_returns_the_input(self, rendered, tmp_path):
        config = NetworkConfig(scale_bins=3, recurrent_iters=1, stages=1, feature_channels=2, dense_layers=1,
                               growth_rate=2, hidden_channels=2)
        checkpoint = save_checkpoint(tmp_path / 'zero.smrc', build_network(config).zeros_like(), config)
        out = tmp_path / 'restored'
        assert main(['derain', '--checkpoint', str(checkpoint), '--out', str(out),
                     '--corpus', str(rendered)]) == EXIT_OK
        manifest = DatasetManifest.read(rendered)
        for entry in manifest:
            observed = manifest.load_scene(entry).observed.data
            restored = read_png(out / f"{entry.id}.png")
            assert np.max(np.abs(restored - observed)) <= 0.5 / 255 + 1e-12

    def test_missing_inputs_are_listed(self, tmp_path, capsys):
        config = NetworkConfig(scale_bins=0, feature_channels=1, dense_layers=0, hidden_channels=1)
        checkpoint = save_checkpoint(tmp_path / 'm.smrc', build_network(config), config)
        code = main(['derain', '--checkpoint', str(checkpoint), '--out', str(tmp_path / 'o'),
                     '--input', str(tmp_path / 'a.png'), str(tmp_path / 'b.png')])
        assert code == EXIT_IO
        err = capsys.readouterr().err
        assert 'a.png' in err and 'b.png' in err

    def test_bad_light_value(self, tmp_path):
        assert main(['derain', '--checkpoint', str(tmp_path / 'm.smrc'), '--out', str(tmp_path),
                     '--input', 'x.png', '--light', '1.5']) == EXIT_VALIDATION


class TestEvaluate:
    def test_ground_truth_scores_perfectly(self, rendered, tmp_path):
        manifest = DatasetManifest.read(rendered)
        restored = tmp_path / 'truth'
        restored.mkdir()
        for entry in manifest:
            write_raw(restored / f"{entry.id}.drf", manifest.load_scene(entry).background.data)
        assert main(['evaluate', '--corpus', str(rendered), '--restored', str(restored)]) == EXIT_OK
        lines = (restored / 'metrics.csv').read_text().splitlines()
        assert lines[-3] == 'mean,99.000000,1.000000'

    def test_missing_restorations(self, rendered, tmp_path):
        assert main(['evaluate', '--corpus', str(rendered), '--restored', str(tmp_path)]) == EXIT_IO


def test_gradcheck_ops(capsys):
    assert main(['gradcheck', '--seeds', '1', '--skip-network']) == EXIT_OK
    assert 'all gradient checks passed' in capsys.readouterr().out


def test_gradcheck_default_suite_includes_network(capsys):
    assert main(['gradcheck', '--seeds', '1']) == EXIT_OK
    out = capsys.readouterr().out
    assert 'PASS smrnet_veil_8x8[seed=0]' in out
    assert 'FAIL' not in out
    assert 'all gradient checks passed' in out


def test_ablate_writes_table(rendered, small_run, tmp_path):
    out = tmp_path / 'ablation'
    assert main(['ablate', '--corpus', str(rendered), '--out', str(out), '--config', str(small_run),
                 '--modules', '0', '3', '--epochs', '1']) == EXIT_OK
    lines = (out / ABLATION_CSV).read_text().splitlines()
    assert [line.split(',')[0] for line in lines[1:]] == ['modules_0', 'modules_3']


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_VALIDATION
    assert 'usage' in capsys.readouterr().out
