import numpy as np
import pytest

from datagen import RainSceneSpec, generate_dataset
from rain_model import RainScene, compose_linear, compose_veiled
from smrnet import NetworkConfig
from tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A network small enough for finite-difference checks"""
    return NetworkConfig(scale_bins=3, recurrent_iters=2, stages=2, feature_channels=2, dense_layers=1,
                         growth_rate=2, hidden_channels=2, seed=0)


@pytest.fixture
def tiny_veil_config(tiny_config):
    return NetworkConfig(**{**tiny_config.to_dict(), 'veil_enabled': True})


def make_random_scene(rng, size=(8, 8), layers=3, veiled=True):
    """A scene with random ground truth that respects every RainScene invariant"""
    shape = (3,) + tuple(size)
    background = rng.uniform(0.0, 0.7, size=shape)
    streaks = [rng.uniform(0.0, 0.1, size=shape) for _ in range(layers)]
    alpha = rng.uniform(0.4, 1.0, size=(1,) + tuple(size)) if veiled else np.ones((1,) + tuple(size))
    light = float(rng.uniform(0.7, 1.0))
    observed = compose_veiled(background, streaks, alpha, light) if veiled \
        else compose_linear(background, streaks)
    return RainScene(Tensor(background), [Tensor(s) for s in streaks], Tensor(alpha), light, observed)


@pytest.fixture
def random_scene(rng):
    return make_random_scene(rng)


@pytest.fixture(scope='session')
def corpus(tmp_path_factory):
    """Six rendered 32 x 32 scenes without veil"""
    out = tmp_path_factory.mktemp('corpus')
    return generate_dataset(RainSceneSpec(seed=11, image_size=(32, 32)), 6, out, threads=2)


@pytest.fixture(scope='session')
def veiled_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp('veiled_corpus')
    return generate_dataset(RainSceneSpec(seed=12, image_size=(32, 32), veil_enabled=True), 6, out, threads=2)


@pytest.fixture
def scene_factory():
    return make_random_scene
