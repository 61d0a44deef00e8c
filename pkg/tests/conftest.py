import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import fixtures  # noqa: E402
from inv3d.camera import CameraPose  # noqa: E402
from inv3d.generator import (GeneratorConfig, RenderConfig,  # noqa: E402
                             TriplaneGenerator)


@pytest.fixture(scope="session")
def toy_checkpoint_path():
    return fixtures.ensure_toy_checkpoint()


@pytest.fixture(scope="session")
def toy_generator(toy_checkpoint_path):
    gen, latents, meta = fixtures.load_toy_generator()
    return gen, latents, meta


@pytest.fixture(scope="session")
def train_dataset_root():
    return fixtures.ensure_train_dataset()


@pytest.fixture(scope="session")
def bench_dataset_root():
    return fixtures.ensure_bench_dataset()


@pytest.fixture
def fresh_generator():
    """Small untrained generator for cheap structural tests."""
    return TriplaneGenerator(GeneratorConfig(), seed=7)


@pytest.fixture
def small_render():
    return RenderConfig(image_size=16, samples_per_ray=8)


@pytest.fixture
def canonical_pose():
    return CameraPose(yaw=0.0, pitch=0.0, radius=2.6, fov_y=0.6)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    np.random.seed(0)
