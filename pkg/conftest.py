import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dualnet import DenoiserConfig  # noqa: E402
from geometry import DepthMap, View, look_at  # noqa: E402
from pipeline import InferConfig, TrainConfig, configure_determinism, precompute_geometry  # noqa: E402
from scene_forge import generate_scene, scene_config_from_preset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run the multi-scene ordering harnesses")


def pytest_configure(config):
    config.addinivalue_line('markers', "slow: end-to-end training runs over several scenes and seeds")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def random_camera(rng, size=32):
    eye = (rng.uniform(-1.0, 1.0), -4.0 + rng.uniform(-0.5, 0.5), rng.uniform(1.0, 3.0))
    return look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 60.0, size, size)


def random_view(rng, size=32, invalid_fraction=0.1):
    camera = random_camera(rng, size)
    values = rng.uniform(1.0, 6.0, size=(size, size))
    valid = rng.random((size, size)) >= invalid_fraction
    image = np.round(rng.random((size, size, 3)) * 255) / 255
    return View(image, DepthMap(values, valid), camera)


@pytest.fixture(autouse=True)
def single_thread():
    configure_determinism(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def tiny_scene():
    return generate_scene(scene_config_from_preset('tiny'), 3)


@pytest.fixture(scope='session')
def tiny_products(tiny_scene):
    return precompute_geometry(tiny_scene)


@pytest.fixture
def tiny_model_config():
    return DenoiserConfig(width=32, height=32, patch=4, hidden=32, blocks=1, heads=2, time_dim=16, timesteps=20)


@pytest.fixture
def quick_train():
    return TrainConfig(iterations=3, batch_size=2, learning_rate=1e-3, log_every=1)


@pytest.fixture
def quick_infer():
    return InferConfig(steps=3)
